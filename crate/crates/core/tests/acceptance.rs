//! End-to-end acceptance checks, one test per criterion. Each prints a
//! single PASS/FAIL line straight to stderr so it survives output capture.

mod common;

use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use moth_core::config::RunConfig;
use moth_core::dataset::Dataset;
use moth_core::fine::{action_loss_from_velocity, flow_loss_act};
use moth_core::flow::{self, Guided};
use moth_core::intention::{flow_loss_mano, mano_loss_from_velocity, sample_mano, HandState, IntentionStates, JOINTS};
use moth_core::layout::{build_mask, Expert, SpanKind, SpanLayout};
use moth_core::metrics::{self, evaluate_clips, HandGenerator, ModelHandGenerator};
use moth_core::model::{FlowInput, Model, Query, HAND_DIM};
use moth_core::quat;
use moth_core::runs;
use moth_core::synth::{Episode, Split};
use moth_core::waypoint::{loss_3d, teacher_forced_logits};
use moth_core::Result;
use moth_tensor::check::{central_difference, relative_error};
use moth_tensor::{GradBuffer, ParamId, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_MIN_INSTANCES: usize = 100;
const FD_BUDGET_SECS: f64 = 120.0;
const EULER_TOL: f64 = 1e-12;
const DTW_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-6;
const ROT_TOL: f64 = 1e-9;
const WAYPOINT_ACC_MIN: f64 = 0.95;
const ADE_MAX: f64 = 0.05;
const RMSE_MAX: f64 = 0.05;
const E2E_STEPS: u64 = 2000;
const RESUME_REL_TOL: f64 = 1e-6;
const EVAL_TOL: f64 = 1e-9;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {verdict} {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

// ---- criterion 1 -----------------------------------------------------------

type OpFn = fn(&mut Tape<'_, f64>, Var) -> Var;

/// Relative error of the reverse-mode gradient of `sum(w ⊙ f(x))` against
/// central differences.
fn op_error(shape: &[usize], f: OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let n: usize = shape.iter().product();
    let x0 = random(rng, n);
    let out_len = {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(shape, x0.clone()).unwrap());
        let y = f(&mut tape, x);
        tape.value(y).len()
    };
    let w = random(rng, out_len);
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(shape, x.to_vec()).unwrap());
        let y = f(&mut tape, xv);
        tape.value(y).iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(shape, x0.clone()).unwrap(), true);
    let y = f(&mut tape, x);
    let ys = tape.shape(y).to_vec();
    let wv = tape.constant(Tensor::new(&ys, w.clone()).unwrap());
    let p = tape.mul(y, wv).unwrap();
    let loss = tape.sum(p);
    let g = tape.backward(loss).unwrap().of_or_zero(x, n);
    let coords: Vec<usize> = (0..n).collect();
    let fd = central_difference(eval, &x0, &coords, FD_STEP);
    relative_error(&g, &fd, 1e-10)
}

fn op_cases() -> Vec<(&'static str, Vec<usize>, OpFn)> {
    vec![
        ("matmul", vec![5, 3], |tp, x| {
            let a = tp.slice_rows(x, 0, 2).unwrap();
            let b = tp.slice_rows(x, 2, 3).unwrap();
            tp.matmul(a, b).unwrap()
        }),
        ("matmul_nt", vec![5, 3], |tp, x| {
            let a = tp.slice_rows(x, 0, 2).unwrap();
            tp.matmul_nt(a, x).unwrap()
        }),
        ("add", vec![2, 4], |tp, x| {
            let s = tp.gelu(x);
            tp.add(x, s).unwrap()
        }),
        ("add_row", vec![3, 4], |tp, x| {
            let b = tp.slice_rows(x, 0, 1).unwrap();
            tp.add_row(x, b).unwrap()
        }),
        ("mul", vec![2, 4], |tp, x| tp.mul(x, x).unwrap()),
        ("scale", vec![2, 4], |tp, x| tp.scale(x, -0.7)),
        ("gelu", vec![3, 4], |tp, x| tp.gelu(x)),
        ("softmax", vec![3, 5], |tp, x| tp.softmax_lastdim(x).unwrap()),
        ("masked_softmax", vec![3, 3], |tp, x| {
            let m: Rc<[bool]> = Rc::from(vec![true, false, false, true, true, false, true, true, true]);
            tp.masked_softmax(x, m).unwrap()
        }),
        ("layer_norm", vec![4, 5], |tp, x| {
            let g = tp.slice_rows(x, 0, 1).unwrap();
            let b = tp.slice_rows(x, 1, 1).unwrap();
            let r = tp.slice_rows(x, 2, 2).unwrap();
            tp.layer_norm(r, g, b, 1e-5).unwrap()
        }),
        ("embedding", vec![4, 3], |tp, x| tp.embedding(x, &[2, 0, 2, 3]).unwrap()),
        ("concat_lastdim", vec![2, 3], |tp, x| {
            let g = tp.gelu(x);
            tp.concat_lastdim(&[x, g]).unwrap()
        }),
        ("concat_rows", vec![2, 3], |tp, x| {
            let g = tp.gelu(x);
            tp.concat_rows(&[g, x]).unwrap()
        }),
        ("slice_rows", vec![4, 3], |tp, x| tp.slice_rows(x, 1, 2).unwrap()),
        ("slice_cols", vec![3, 4], |tp, x| tp.slice_cols(x, 1, 2).unwrap()),
        ("gather_rows", vec![3, 3], |tp, x| tp.gather_rows(x, &[2, 2, 0]).unwrap()),
        ("sum", vec![2, 3], |tp, x| {
            let g = tp.gelu(x);
            tp.sum(g)
        }),
        ("cross_entropy", vec![3, 5], |tp, x| tp.cross_entropy(x, &[4, 0, 2]).unwrap()),
        ("mse_weighted", vec![2, 6], |tp, x| {
            let p = tp.slice_cols(x, 0, 3).unwrap();
            let q = tp.slice_cols(x, 3, 3).unwrap();
            tp.mse_weighted(p, q, 0.3).unwrap()
        }),
        ("reshape", vec![2, 6], |tp, x| {
            let r = tp.reshape(x, &[3, 4]).unwrap();
            tp.softmax_lastdim(r).unwrap()
        }),
    ]
}

/// Relative error of parameter gradients of one model loss at a sample of
/// coordinates. With insulation on, upstream parameters still move the loss
/// value but by design receive no gradient, so only `owner`'s parameters are
/// sampled; with insulation off every reached parameter is.
fn loss_error<F>(model: &Model<f64>, insulate: bool, owner: Expert, loss: F, rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&Model<f64>, &mut Tape<'_, f64>) -> Result<Var>,
{
    let mut model = model.clone();
    model.config.insulate = insulate;
    let g = {
        let mut tape = Tape::with_params(&model.params);
        let l = loss(&model, &mut tape).unwrap();
        tape.backward(l).unwrap()
    };
    let ids: Vec<ParamId> = if insulate {
        model.expert_params(owner)
    } else {
        model.params.ids().filter(|&id| g.param(id).is_some()).collect()
    };
    let picks: Vec<(ParamId, usize)> = (0..24)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..model.params.value(id).len()))
        })
        .collect();
    let analytic: Vec<f64> = picks.iter().map(|&(id, i)| g.param(id).map_or(0.0, |s| s[i])).collect();
    let numeric: Vec<f64> = picks
        .iter()
        .map(|&(id, i)| {
            let mut m = model.clone();
            let x0 = m.params.value(id)[i];
            let mut at = |v: f64| {
                m.params.value_mut(id)[i] = v;
                let mut tape = Tape::with_params(&m.params);
                let l = loss(&m, &mut tape).unwrap();
                tape.item(l)
            };
            (at(x0 + FD_STEP) - at(x0 - FD_STEP)) / (2.0 * FD_STEP)
        })
        .collect();
    relative_error(&analytic, &numeric, 1e-8)
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut instances = 0;
    for (name, shape, f) in op_cases() {
        for _ in 0..5 {
            let e = op_error(&shape, f, &mut rng);
            instances += 1;
            if e > worst || e.is_nan() {
                worst = e;
                worst_name = name;
            }
        }
    }

    let cfg = common::small_model_config(4);
    let data = common::small_dataset(&cfg, 7);
    let hand_eps: Vec<&Episode> = data.episodes.iter().filter(|e| e.hand.is_some()).take(4).collect();
    let act_eps: Vec<&Episode> = data.episodes.iter().filter(|e| e.actions.is_some()).take(4).collect();
    for k in 0..4u64 {
        let model: Model<f64> = common::small_model(&cfg, 200 + k);
        let he = hand_eps[k as usize];
        let ae = act_eps[k as usize];
        let hi = data.inputs(he).unwrap();
        let ai = data.inputs(ae).unwrap();
        let l3d = |m: &Model<f64>, tp: &mut Tape<'_, f64>| {
            let lg = teacher_forced_logits(m, tp, &hi.objects, Some(&hi.text), &hi.plan)?;
            loss_3d(tp, lg, &hi.plan)
        };
        let lmano = |m: &Model<f64>, tp: &mut Tape<'_, f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(k);
            let hand = he.hand.as_ref().unwrap();
            flow_loss_mano(m, tp, &hi.objects, Some(&hi.text), Some(&hi.plan), hand, &mut r)
        };
        let lact = |m: &Model<f64>, tp: &mut Tape<'_, f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(k);
            let int = IntentionStates::noise(m.config.horizon, &mut r);
            let target = ae.actions.as_ref().unwrap();
            flow_loss_act(m, tp, &ai.objects, Some(&ai.text), Some(&ai.plan), Some(&int), target, &mut r)
        };
        let mut checks = Vec::new();
        for insulate in [false, true] {
            checks.push(("L_3d", loss_error(&model, insulate, Expert::Vl, l3d, &mut rng)));
            checks.push(("L_mano", loss_error(&model, insulate, Expert::Intention, lmano, &mut rng)));
            checks.push(("L_act", loss_error(&model, insulate, Expert::Fine, lact, &mut rng)));
        }
        for (name, e) in checks {
            instances += 1;
            if e > worst || e.is_nan() {
                worst = e;
                worst_name = name;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < FD_TOL && instances >= FD_MIN_INSTANCES && secs < FD_BUDGET_SECS;
    report(
        1,
        "gradient suite",
        pass,
        &format!("{instances} instances, worst relative error {worst:.2e} ({worst_name}), {secs:.1}s"),
    );
}

// ---- criterion 2 -----------------------------------------------------------

/// Mask rule enumeration from span offsets alone.
fn oracle_mask(l: &SpanLayout) -> Vec<bool> {
    let prefix = l.n_img + l.n_txt;
    let mut starts = Vec::new();
    let mut off = prefix;
    for (present, kind) in [(l.traj3d, 't'), (l.mano, 'm'), (l.action, 'a')] {
        if present {
            starts.push((kind, off));
            off += l.horizon;
        }
    }
    let n = off;
    let mut cells = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            cells[q * n + k] = if q < prefix {
                k < prefix
            } else {
                let &(kind, s) = starts.iter().rev().find(|&&(_, s)| q >= s).unwrap();
                match kind {
                    'a' => true,
                    _ => k < s || (k >= s && k <= q),
                }
            };
        }
    }
    cells
}

#[test]
fn criterion_02_mask_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut cells = 0;
    for _ in 0..50 {
        let l = SpanLayout {
            n_img: rng.random_range(1..=16),
            n_txt: rng.random_range(1..=16),
            horizon: rng.random_range(1..=15),
            traj3d: rng.random(),
            mano: rng.random(),
            action: rng.random(),
        };
        let got = build_mask(&l).unwrap();
        let want = oracle_mask(&l);
        cells += want.len();
        if got.cells() != want.as_slice() {
            mismatches += 1;
        }
    }
    report(2, "mask oracle", mismatches == 0, &format!("50 layouts, {cells} cells, {mismatches} mismatching layouts"));
}

// ---- criterion 3 -----------------------------------------------------------

fn group_norm(model: &Model<f64>, g: &GradBuffer<f64>, e: Expert) -> f64 {
    g.norm_of(model.expert_params(e))
}

struct InsulationProbe {
    act_vl: f64,
    act_int: f64,
    mano_vl: f64,
    outputs: Vec<f64>,
}

fn insulation_probe(model: &Model<f64>, data: &Dataset, e: &Episode, insulate: bool, seed: u64) -> InsulationProbe {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inp = data.inputs(e).unwrap();
    let mano_x = flow::gaussian(c.horizon * HAND_DIM, &mut rng);
    let act_x = flow::gaussian(c.horizon * c.action_dim, &mut rng);
    let mano_v = flow::gaussian(c.horizon * HAND_DIM, &mut rng);
    let act_v = flow::gaussian(c.horizon * c.action_dim, &mut rng);
    let (tm, ta) = (rng.random::<f64>(), rng.random::<f64>());
    let valid = vec![true; c.horizon];
    let mut q = Query::new(&inp.objects, Some(&inp.text));
    q.waypoints = Some(&inp.plan.bins);
    q.mano = Some(FlowInput { x: &mano_x, t: tm });
    q.mano_valid = Some(&valid);
    q.action = Some(FlowInput { x: &act_x, t: ta });
    q.insulate = Some(insulate);

    let mut outputs = Vec::new();
    let mut run = |which: SpanKind| -> GradBuffer<f64> {
        let mut tape = Tape::with_params(&model.params);
        let fwd = model.forward(&mut tape, &q).unwrap();
        for s in [SpanKind::Traj3d, SpanKind::Mano, SpanKind::Action] {
            let h = model.head(&mut tape, &fwd, s).unwrap();
            if which == SpanKind::Action {
                outputs.extend_from_slice(tape.value(h));
            }
        }
        let l = if which == SpanKind::Action {
            let v = model.head(&mut tape, &fwd, SpanKind::Action).unwrap();
            action_loss_from_velocity(&mut tape, v, &act_v).unwrap()
        } else {
            let v = model.head(&mut tape, &fwd, SpanKind::Mano).unwrap();
            mano_loss_from_velocity(&mut tape, v, &mano_v, &valid).unwrap()
        };
        let mut buf = model.params.zeros_like();
        tape.backward_into(l, 1.0, &mut buf).unwrap();
        buf
    };
    let ga = run(SpanKind::Action);
    let gm = run(SpanKind::Mano);
    InsulationProbe {
        act_vl: group_norm(model, &ga, Expert::Vl),
        act_int: group_norm(model, &ga, Expert::Intention),
        mano_vl: group_norm(model, &gm, Expert::Vl),
        outputs,
    }
}

#[test]
fn criterion_03_insulation() {
    let cfg = common::small_model_config(4);
    let data = common::small_dataset(&cfg, 3);
    let mut on_zero = true;
    let mut off_positive = true;
    let mut max_diff = 0.0f64;
    let mut min_off = f64::INFINITY;
    for k in 0..5u64 {
        let model: Model<f64> = common::small_model(&cfg, 300 + k);
        let e = &data.episodes[k as usize * 3];
        let on = insulation_probe(&model, &data, e, true, k);
        let off = insulation_probe(&model, &data, e, false, k);
        on_zero &= on.act_vl == 0.0 && on.act_int == 0.0 && on.mano_vl == 0.0;
        off_positive &= off.act_vl > 0.0 && off.act_int > 0.0 && off.mano_vl > 0.0;
        min_off = min_off.min(off.act_vl).min(off.act_int).min(off.mano_vl);
        for (a, b) in on.outputs.iter().zip(&off.outputs) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    report(
        3,
        "insulation",
        on_zero && off_positive && max_diff == 0.0,
        &format!("blocked norms all zero: {on_zero}; smallest unblocked norm {min_off:.3e}; forward max abs diff {max_diff:e}"),
    );
}

// ---- criterion 4 -----------------------------------------------------------

#[test]
fn criterion_04_flow_sampler() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let target = random(&mut rng, 12);
        let eps = flow::gaussian(12, &mut rng);
        for n in [1usize, 5, 10] {
            // Conditional velocity of the linear path through `target`.
            let mut oracle = |x: &[f64], t: f64| -> Result<Vec<f64>> {
                Ok(x.iter().zip(&target).map(|(xi, m)| (m - xi) / (1.0 - t)).collect())
            };
            let out = flow::euler(&mut oracle, eps.clone(), n).unwrap();
            for (a, b) in out.iter().zip(&target) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    // Guidance at scale 1 against the conditional branch alone, field level.
    let mut field_equal = true;
    for _ in 0..20 {
        let x0 = flow::gaussian(8, &mut rng);
        let w = random(&mut rng, 8);
        let cond = |x: &[f64], t: f64| -> Result<Vec<f64>> { Ok(x.iter().zip(&w).map(|(a, b)| (a * b).sin() + t).collect()) };
        let uncond = |x: &[f64], t: f64| -> Result<Vec<f64>> { Ok(x.iter().map(|a| a.cos() * t).collect()) };
        let mut guided = Guided { cond, uncond, scale: 1.0 };
        let a = flow::euler(&mut guided, x0.clone(), 7).unwrap();
        let mut plain = cond;
        let b = flow::euler(&mut plain, x0, 7).unwrap();
        field_equal &= a == b;
    }

    // And through the hand sampler of a real model.
    let cfg = common::small_model_config(4);
    let data = common::small_dataset(&cfg, 4);
    let model: Model<f64> = common::small_model(&cfg, 404);
    let e = &data.episodes[0];
    let inp = data.inputs(e).unwrap();
    let (guided, _) = sample_mano(&model, &inp.objects, Some(&inp.text), Some(&inp.plan), 5, 1.0, 77).unwrap();
    let mut cond = |x: &[f64], t: f64| -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&model.params);
        let mut q = Query::new(&inp.objects, Some(&inp.text));
        q.waypoints = Some(&inp.plan.bins);
        q.mano = Some(FlowInput { x, t });
        let fwd = model.forward(&mut tape, &q)?;
        let v = model.head(&mut tape, &fwd, SpanKind::Mano)?;
        Ok(tape.value(v).to_vec())
    };
    let x0 = flow::gaussian(cfg.horizon * HAND_DIM, &mut moth_core::rng::seeded(77));
    let plain = flow::euler(&mut cond, x0, 5).unwrap();
    let plain = HandState::new(plain, vec![true; cfg.horizon]).unwrap().canonicalized().unwrap();
    let model_equal = guided == plain;

    report(
        4,
        "flow sampler",
        worst <= EULER_TOL && field_equal && model_equal,
        &format!("max |x_N - target| {worst:.1e} over N in {{1,5,10}}; s=1 bitwise: fields {field_equal}, hand sampler {model_equal}"),
    );
}

// ---- criterion 5 -----------------------------------------------------------

/// Exhaustive search over monotone alignment paths; lexicographic
/// minimum of (cost, length).
fn brute_dtw(x: &[[f64; 3]], y: &[[f64; 3]]) -> (f64, usize) {
    fn walk(x: &[[f64; 3]], y: &[[f64; 3]], i: usize, j: usize, cost: f64, len: usize, best: &mut (f64, usize)) {
        let d = ((x[i][0] - y[j][0]).powi(2) + (x[i][1] - y[j][1]).powi(2) + (x[i][2] - y[j][2]).powi(2)).sqrt();
        let (cost, len) = (cost + d, len + 1);
        if i == x.len() - 1 && j == y.len() - 1 {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < x.len() {
            walk(x, y, i + 1, j, cost, len, best);
        }
        if j + 1 < y.len() {
            walk(x, y, i, j + 1, cost, len, best);
        }
        if i + 1 < x.len() && j + 1 < y.len() {
            walk(x, y, i + 1, j + 1, cost, len, best);
        }
    }
    let mut best = (f64::INFINITY, usize::MAX);
    walk(x, y, 0, 0, 0.0, 0, &mut best);
    best
}

#[test]
fn criterion_05_dtw_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut len_mismatch = 0;
    for _ in 0..200 {
        let seq = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            let n = rng.random_range(1..=6);
            (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
        };
        let x = seq(&mut rng);
        let y = seq(&mut rng);
        let (c, l) = metrics::dtw_raw(&x, &y).unwrap();
        let (bc, bl) = brute_dtw(&x, &y);
        worst = worst.max((c - bc).abs()).max((metrics::dtw(&x, &y).unwrap() - bc / bl as f64).abs());
        len_mismatch += (l != bl) as usize;
    }
    report(
        5,
        "DTW oracle",
        worst <= DTW_TOL && len_mismatch == 0,
        &format!("200 pairs, max deviation {worst:.1e}, path-length mismatches {len_mismatch}"),
    );
}

// ---- criterion 6 -----------------------------------------------------------

#[test]
fn criterion_06_quaternions() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut collapsed = 0;
    for _ in 0..1000 {
        let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let neg = q.map(|c: f64| -c);
        let a = quat::canonicalize(&q).unwrap();
        let b = quat::canonicalize(&neg).unwrap();
        collapsed += (a == b && quat::rot_error(&q, &neg).unwrap() == 0.0) as usize;
    }

    let cfg = common::small_model_config(4);
    let data = common::small_dataset(&cfg, 6);
    let model: Model<f64> = common::small_model(&cfg, 606);
    let mut worst_norm = 0.0f64;
    let mut count = 0;
    let mut check = |h: &HandState| {
        for t in 0..h.horizon() {
            for q in std::iter::once(h.wrist_quat(t)).chain((0..JOINTS).map(|j| h.joint(t, j))) {
                worst_norm = worst_norm.max((quat::norm(&q) - 1.0).abs());
                count += 1;
            }
        }
    };
    for (k, e) in data.episodes.iter().take(8).enumerate() {
        let inp = data.inputs(e).unwrap();
        let (h, _) = sample_mano(&model, &inp.objects, Some(&inp.text), Some(&inp.plan), 3, 6.0, k as u64).unwrap();
        check(&h);
        if let Some(gt) = &e.hand {
            check(gt);
        }
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let angle = quat::rot_error(&quat::IDENTITY, &[s, 0.0, 0.0, s]).unwrap();
    report(
        6,
        "quaternions",
        collapsed == 1000 && worst_norm <= UNIT_TOL && (angle - 90.0).abs() <= ROT_TOL,
        &format!("{collapsed}/1000 sign pairs collapse; {count} hand quaternions, max |norm-1| {worst_norm:.1e}; 90° about z -> {angle}"),
    );
}

// ---- criterion 7 -----------------------------------------------------------

#[test]
fn criterion_07_end_to_end() {
    let mut cfg = RunConfig::desk();
    cfg.train.steps = E2E_STEPS;
    cfg.sampling.eval_clips = 0;
    let start = Instant::now();
    let data = Dataset::generate(&cfg.world, &cfg.splits, &cfg.effective_model(), cfg.seed).unwrap();
    let (ck, records) = runs::train(&cfg, &data, None, None, &mut std::io::sink()).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let model = runs::inference_model(&cfg, &ck).unwrap();
    let rep = runs::evaluate(&cfg, &model, &data, Split::HeldOutLayout).unwrap();
    let acc = rep.waypoint_accuracy.unwrap();
    let min_acc = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let ade = rep.motion.as_ref().unwrap().mean.ade_m;
    let max_rmse = rep.action_rmse.iter().cloned().fold(0.0, f64::max);
    report(
        7,
        "end-to-end synthetic learning",
        min_acc >= WAYPOINT_ACC_MIN && ade <= ADE_MAX && max_rmse <= RMSE_MAX,
        &format!(
            "{} steps in {train_secs:.0}s, final loss {:.4}; held-out layout ({} clips): waypoint top-1 {:.4}/{:.4}/{:.4}, ADE {ade:.4}, max action RMSE {max_rmse:.4} {:?}",
            records.len(),
            records.last().unwrap().total,
            rep.clips,
            acc[0],
            acc[1],
            acc[2],
            rep.action_rmse.iter().map(|r| (r * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    );
}

// ---- criterion 8 -----------------------------------------------------------

/// Reduced setting for twelve training runs: half the batch, half the steps.
fn ablation_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.width = 128;
    c.model.depth = 4;
    c.train.batch_size = 32;
    c.train.steps = 1000;
    c.sampling.eval_clips = 0;
    c
}

#[test]
fn criterion_08_ablation_ordering() {
    let cfg = ablation_config();
    let data = Dataset::generate(&cfg.world, &cfg.splits, &cfg.model, cfg.seed).unwrap();
    let rep = runs::ablate(&cfg, &data, &[0, 1, 2], Split::HeldOutInstruction, &mut std::io::sink()).unwrap();
    let mean = |arm: &str| {
        let m = rep.arm_mean(arm).unwrap();
        (m.iter().sum::<f64>() / m.len() as f64, m[m.len() - 1])
    };
    let (full, full_g) = mean("+insulation");
    let (no_ins, no_ins_g) = mean("+intention");
    let (no_int, no_int_g) = mean("+traj3d");
    let (base, base_g) = mean("baseline");
    let ordered = full <= no_ins && no_ins <= no_int && no_int <= base;
    let gripper_best = full_g < no_ins_g && full_g < no_int_g && full_g < base_g;
    report(
        8,
        "ablation ordering",
        ordered && gripper_best,
        &format!(
            "seed-mean RMSE full {full:.4} <= no-insulation {no_ins:.4} <= no-intention {no_int:.4} <= baseline {base:.4}: {ordered}; gripper {full_g:.4}/{no_ins_g:.4}/{no_int_g:.4}/{base_g:.4}, full strictly best: {gripper_best}"
        ),
    );
}

// ---- criterion 9 -----------------------------------------------------------

fn probe_outputs(model: &Model<f32>, data: &Dataset) -> Vec<f32> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut out = Vec::new();
    for e in data.episodes.iter().take(4) {
        let inp = data.inputs(e).unwrap();
        let mx = flow::gaussian(c.horizon * HAND_DIM, &mut rng);
        let ax = flow::gaussian(c.horizon * c.action_dim, &mut rng);
        let mut q = Query::new(&inp.objects, Some(&inp.text));
        q.waypoints = Some(&inp.plan.bins);
        q.mano = Some(FlowInput { x: &mx, t: 0.3 });
        q.action = Some(FlowInput { x: &ax, t: 0.6 });
        let mut tape = Tape::with_params(&model.params);
        let fwd = model.forward(&mut tape, &q).unwrap();
        for s in [SpanKind::Traj3d, SpanKind::Mano, SpanKind::Action] {
            let h = model.head(&mut tape, &fwd, s).unwrap();
            out.extend_from_slice(tape.value(h));
        }
    }
    out
}

#[test]
fn criterion_09_reproducibility() {
    let cfg = common::small_run(99);
    let data = Dataset::generate(&cfg.world, &cfg.splits, &cfg.model, cfg.seed).unwrap();
    let trace = |c: &RunConfig| {
        let (ck, recs) = runs::train(c, &data, None, None, &mut std::io::sink()).unwrap();
        (ck, recs.iter().map(|r| [r.total, r.l3d, r.lmano, r.lact, r.grad_norm]).collect::<Vec<_>>())
    };
    let (ck, a) = trace(&cfg);
    let (_, b) = trace(&cfg);
    let trace_equal = a.len() == 50 && a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ck.save(&path).unwrap();
    let loaded = moth_core::checkpoint::Checkpoint::load(&path).unwrap();
    let before = Model::from_params(cfg.effective_model(), ck.params.clone()).unwrap();
    let after = Model::from_params(cfg.effective_model(), loaded.params.clone()).unwrap();
    let probe_equal = probe_outputs(&before, &data) == probe_outputs(&after, &data);

    let mut t = runs::trainer(&cfg, &data, None).unwrap();
    for _ in 0..25 {
        t.step().unwrap();
    }
    let mid = moth_core::checkpoint::Checkpoint::from_bytes(&runs::checkpoint_of(&t).to_bytes().unwrap()).unwrap();
    let mut resumed = runs::trainer(&cfg, &data, Some(&mid)).unwrap();
    let next = resumed.step().unwrap();
    let rel = (next.total - a[25][0]).abs() / a[25][0].abs();
    report(
        9,
        "reproducibility",
        trace_equal && probe_equal && rel <= RESUME_REL_TOL,
        &format!("50-step trace bitwise: {trace_equal}; probe outputs after save/load bitwise: {probe_equal}; resumed step-25 loss relative diff {rel:e}"),
    );
}

// ---- criterion 10 ----------------------------------------------------------

/// Ground truth with a seed-dependent wrist shift and twist, all steps valid.
struct Shifted;

fn twist(q: [f64; 4], angle: f64) -> [f64; 4] {
    let r = [(angle / 2.0).cos(), (angle / 2.0).sin(), 0.0, 0.0];
    quat::mul(&r, &q)
}

impl HandGenerator for Shifted {
    fn generate(&self, clip: &Episode, seed: u64) -> Result<HandState> {
        let gt = clip.hand.as_ref().unwrap();
        let s = seed as f64;
        let mut frames = gt.frames.clone();
        for (h, row) in frames.chunks_mut(HAND_DIM).enumerate() {
            row[0] += 0.01 * s;
            row[1] -= 0.003 * (h as f64 + s);
            row[2] += 0.002 * s * s;
            let w = twist([row[3], row[4], row[5], row[6]], 0.05 * s + 0.01 * h as f64);
            row[3..7].copy_from_slice(&w);
            let j = twist([row[7], row[8], row[9], row[10]], 0.2 * s);
            row[7..11].copy_from_slice(&j);
        }
        HandState::new(frames, vec![true; gt.horizon()])
    }
}

/// Rotation angle from the chord between the sign-aligned unit quaternions.
fn angle_deg(p: &[f64], g: &[f64]) -> f64 {
    let unit = |q: &[f64]| {
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let (p, mut g) = (unit(p), unit(g));
    if p.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
        g.iter_mut().for_each(|x| *x = -*x);
    }
    let diff = p.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let sum = p.iter().zip(&g).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
    4.0 * diff.atan2(sum).to_degrees()
}

/// Metrics of one generation computed directly from the frame layout.
fn by_hand(pred: &HandState, gt: &HandState) -> [f64; 4] {
    let steps: Vec<usize> = (0..gt.horizon()).filter(|&h| gt.valid[h]).collect();
    let row = |s: &HandState, h: usize| s.frames[h * HAND_DIM..(h + 1) * HAND_DIM].to_vec();
    let pos = |r: &[f64]| [r[0], r[1], r[2]];
    let ade = steps
        .iter()
        .map(|&h| {
            let (p, g) = (row(pred, h), row(gt, h));
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / steps.len() as f64;
    let pt: Vec<[f64; 3]> = (0..pred.horizon()).map(|h| pos(&row(pred, h))).collect();
    let gtt: Vec<[f64; 3]> = steps.iter().map(|&h| pos(&row(gt, h))).collect();
    let (c, l) = brute_dtw(&pt, &gtt);
    let rot = steps.iter().map(|&h| angle_deg(&row(pred, h)[3..7], &row(gt, h)[3..7])).sum::<f64>() / steps.len() as f64;
    let joint = steps
        .iter()
        .map(|&h| {
            let (p, g) = (row(pred, h), row(gt, h));
            (0..JOINTS).map(|j| angle_deg(&p[7 + 4 * j..11 + 4 * j], &g[7 + 4 * j..11 + 4 * j])).sum::<f64>() / JOINTS as f64
        })
        .sum::<f64>()
        / steps.len() as f64;
    [ade, c / l as f64, rot, joint]
}

#[test]
fn criterion_10_evaluation_protocol() {
    let cfg = common::small_model_config(4);
    let data = common::small_dataset(&cfg, 10);
    let seeds = [11u64, 12, 13, 14, 15];

    let model: Model<f32> = common::small_model(&cfg, 1010);
    let gen = ModelHandGenerator { model: &model, dataset: &data, flow_steps: 3, cfg_scale: 6.0 };
    let clips: Vec<&Episode> = data.split(Split::HeldOutLayout).take(3).collect();
    let r1 = evaluate_clips(&gen, &clips, &seeds).unwrap();
    let r2 = evaluate_clips(&gen, &clips, &seeds).unwrap();
    let bitwise = r1 == r2 && serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap();

    let mut fixture: Vec<&Episode> = data.episodes.iter().filter(|e| e.hand.as_ref().is_some_and(|h| h.valid_count() < h.horizon())).take(1).collect();
    fixture.extend(data.episodes.iter().filter(|e| e.hand.as_ref().is_some_and(|h| h.valid_count() == h.horizon())).take(2 - fixture.len()));
    let rep = evaluate_clips(&Shifted, &fixture, &[1, 2, 3, 4, 5]).unwrap();
    let mut worst = 0.0f64;
    let mut overall = [0.0; 4];
    for (clip, c) in fixture.iter().zip(&rep.clips) {
        let gt = clip.hand.as_ref().unwrap();
        let mut mean = [0.0; 4];
        for s in 1..=5u64 {
            let m = by_hand(&Shifted.generate(clip, s).unwrap(), gt);
            for k in 0..4 {
                mean[k] += m[k] / 5.0;
            }
        }
        let got = [c.mean.ade_m, c.mean.dtw_m, c.mean.rot_deg, c.mean.joint_rot_deg];
        for k in 0..4 {
            worst = worst.max((got[k] - mean[k]).abs());
            overall[k] += mean[k] / fixture.len() as f64;
        }
    }
    let got = [rep.mean.ade_m, rep.mean.dtw_m, rep.mean.rot_deg, rep.mean.joint_rot_deg];
    for k in 0..4 {
        worst = worst.max((got[k] - overall[k]).abs());
    }
    report(
        10,
        "evaluation protocol",
        bitwise && fixture.len() == 2 && worst <= EVAL_TOL,
        &format!("5-seed report bitwise reproducible: {bitwise}; 2-clip fixture max column deviation {worst:.1e}"),
    );
}
