//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4,12` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wholebody::autograd::{Mat, Tape};
use wholebody::backbone::{build_model, denoise_forward, forward_tape, Batch, Model, ModelConfig};
use wholebody::checkpoint::backbone_hash;
use wholebody::cli::raw_features;
use wholebody::conditioning::{segment_ranges, ConditionKind, HashEmbedder};
use wholebody::control_branch::{attach_control_branch, controlled_forward, FreezePolicy};
use wholebody::diffusion::{
    make_linear_schedule, outpaint_sample, p_sample_step, q_sample, DiffusionSchedule,
};
use wholebody::evaluation::{
    beat_align, diversity, fid, r_precision_topk, train_retrieval, FeatureCloud, Provenance, RetrievalConfig,
};
use wholebody::mc_attn::{
    dynamic_forward, init_layer, init_layer_with, moe_forward, static_forward, temporal_forward, LayerDims,
    McAttnLayer,
};
use wholebody::motion_repr::{
    axis_angle_to_matrix, matrix_to_axis_angle, rot6d_to_axis_angle, rot6d_to_matrix, Mat3, MotionSequence, Rot6D,
};
use wholebody::params::{checksums, ParamTree};
use wholebody::topology::{BodyPart, BodyPartLayout};
use wholebody::trainer::{
    generate, make_synthetic_dataset, train_stage1, train_stage2, CaptionStyle, Generator, SyntheticSpec,
    TrainConfig, TrainItem,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0) * scale)
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

fn randomize<P: ParamTree<Mat>>(p: &mut P, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("", &mut |_, m| *m = rand_mat(&mut rng, m.nrows(), m.ncols(), scale));
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny() -> ModelConfig {
    ModelConfig::variant("tiny").expect("tiny variant")
}

// ----------------------------------------------------------------------
// 1. zero bridge

fn c1_zero_bridge() -> Outcome {
    // Full 12-part layout with narrow experts to stay inside the time budget.
    let mut cfg = tiny();
    cfg.hidden = 16;
    let mut model = build_model(&cfg, 1).map_err(|e| e.to_string())?;
    randomize(&mut model.params, 2, 0.2);
    let branch = attach_control_branch(&model, 2, ConditionKind::Music, 3, &backbone_hash(&model))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let width = model.layout.width;
    for i in 0..100 {
        let f = rng.random_range(1..=6);
        let t = rng.random_range(1..=1000);
        let nt = rng.random_range(0..=4);
        let x = randn(&mut rng, f, width);
        let text = randn(&mut rng, nt, model.config.text_dim);
        let track = randn(&mut rng, f, ConditionKind::Music.dim());
        let a = denoise_forward(&model, &x, t, &text, 1000).map_err(|e| e.to_string())?;
        let b = controlled_forward(&model, &branch, &x, t, &text, &track, 1000).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("input {i} differs by {}", max_abs_diff(&a, &b)))?;
        ensure(a.iter().any(|v| *v != 0.0), || format!("input {i}: degenerate all-zero output"))?;
    }
    Ok("100/100 inputs bit-identical".into())
}

// ----------------------------------------------------------------------
// 2. finite differences through a one-layer backbone

fn c2_gradients() -> Outcome {
    let parts = vec![
        BodyPart { name: "a".into(), ranges: vec![0..2] },
        BodyPart { name: "b".into(), ranges: vec![2..5] },
        BodyPart { name: "c".into(), ranges: vec![5..7] },
    ];
    let layout = BodyPartLayout::new(parts, 7, 4).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::custom(1, layout, 3, 2);
    cfg.hidden = 6;
    let mut model = build_model(&cfg, 9).map_err(|e| e.to_string())?;
    randomize(&mut model.params, 10, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (fm, ft) = (4, 2);
    let x = rand_mat(&mut rng, fm, 7, 1.0);
    let target = rand_mat(&mut rng, fm, 7, 1.0);
    let text = rand_mat(&mut rng, ft, 3, 1.0);

    let loss = |params: &wholebody::backbone::Backbone<Mat>, grads: bool| -> (f64, Vec<(String, Mat)>) {
        let mut tape = Tape::new();
        let p = params.map("", &mut |_, m| tape.leaf(m.clone(), grads));
        let batch = Batch::new(&mut tape, &cfg, x.clone(), fm, &[37], std::slice::from_ref(&text)).expect("batch");
        let out = forward_tape(&mut tape, &p, &model.layout, &batch);
        let tg = tape.constant(target.clone());
        let l = tape.mse(out, tg);
        let mut named = Vec::new();
        if grads {
            let g = tape.backward(l);
            p.visit("", &mut |n, v| named.push((n, g.get(*v).cloned().unwrap_or_else(|| Mat::zeros((0, 0))))));
        }
        (tape.scalar(l), named)
    };

    let (_, analytic) = loss(&model.params, true);
    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (name, g) in &analytic {
        let mut fd = Mat::zeros(g.dim());
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let probe = |delta: f64| {
                    let mut p = model.params.clone();
                    p.visit_mut("", &mut |n, m| {
                        if &n == name {
                            m[[i, j]] += delta;
                        }
                    });
                    loss(&p, false).0
                };
                fd[[i, j]] = (probe(eps) - probe(-eps)) / (2.0 * eps);
            }
        }
        let diff = (&fd - g).mapv(|v| v * v).sum().sqrt();
        let scale = fd.mapv(|v| v * v).sum().sqrt().max(g.mapv(|v| v * v).sum().sqrt()).max(1e-8);
        let rel = diff / scale;
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name.clone());
        }
        ensure(rel < 1e-4, || format!("{name}: relative error {rel:.2e}"))?;
    }
    Ok(format!("{} groups, worst {:.2e} ({})", analytic.len(), worst.0, worst.1))
}

// ----------------------------------------------------------------------
// 3. branch oracles

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.ncols()).map(|j| (0..x.len()).map(|i| x[i] * w[[i, j]]).sum()).collect()
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn naive_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let w = naive_softmax(&scores);
    let mut out = vec![0.0; values[0].len()];
    for (wi, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    out
}

fn naive_pe(f: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let even = (i - i % 2) as f64;
            let angle = f as f64 / 10000f64.powf(even / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn token(h: &Array3<f64>, f: usize, p: usize) -> Vec<f64> {
    h.slice(s![f, p, ..]).to_vec()
}

fn oracle_static(h: &Array3<f64>, a: &Mat) -> Array3<f64> {
    let (nf, n, d) = h.dim();
    Array3::from_shape_fn((nf, n, d), |(f, p, c)| (0..n).map(|q| a[[p, q]] * h[[f, q, c]]).sum())
}

fn oracle_dynamic(h: &Array3<f64>, l: &McAttnLayer<Mat>) -> Array3<f64> {
    let (nf, n, d) = h.dim();
    let mut out = Array3::zeros((nf, n, d));
    for f in 0..nf {
        let keys: Vec<Vec<f64>> = (0..n).map(|p| vecmat(&token(h, f, p), &l.dyn_k)).collect();
        let vals: Vec<Vec<f64>> = (0..n).map(|p| vecmat(&token(h, f, p), &l.dyn_v)).collect();
        for p in 0..n {
            let q = vecmat(&token(h, f, p), &l.dyn_q);
            let o = naive_attention(&q, &keys, &vals, 1.0 / (d as f64).sqrt());
            for c in 0..d {
                out[[f, p, c]] = o[c];
            }
        }
    }
    out
}

fn oracle_temporal(h: &Array3<f64>, text: &Mat, l: &McAttnLayer<Mat>, positional: bool) -> Array3<f64> {
    let (nf, n, d) = h.dim();
    let pe = |f: usize| if positional { naive_pe(f, d) } else { vec![0.0; d] };
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let mut out = Array3::zeros((nf, n, d));
    for p in 0..n {
        let mut keys: Vec<Vec<f64>> = (0..nf).map(|f| add(vecmat(&token(h, f, p), &l.tmp_k), pe(f))).collect();
        let mut vals: Vec<Vec<f64>> = (0..nf).map(|f| vecmat(&token(h, f, p), &l.tmp_v)).collect();
        for j in 0..text.nrows() {
            let row = text.row(j).to_vec();
            keys.push(vecmat(&row, &l.text_k));
            vals.push(vecmat(&row, &l.text_v));
        }
        for f in 0..nf {
            let q = add(vecmat(&token(h, f, p), &l.tmp_q), pe(f));
            let o = naive_attention(&q, &keys, &vals, 1.0 / (d as f64).sqrt());
            for c in 0..d {
                out[[f, p, c]] = o[c];
            }
        }
    }
    out
}

fn oracle_moe(x: &Mat, l: &McAttnLayer<Mat>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for r in 0..x.nrows() {
        let row = x.row(r).to_vec();
        let gates = naive_softmax(&vecmat(&row, &l.gate));
        for (g, ex) in gates.iter().zip(&l.experts) {
            let hidden: Vec<f64> = vecmat(&row, &ex.w1)
                .iter()
                .enumerate()
                .map(|(j, v)| naive_gelu(v + ex.b1[[0, j]]))
                .collect();
            let y = vecmat(&hidden, &ex.w2);
            for c in 0..x.ncols() {
                out[[r, c]] += g * (y[c] + ex.b2[[0, c]]);
            }
        }
    }
    out
}

fn max3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c3_branch_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut worst = [0.0f64; 4];
    for i in 0..50 {
        let (f, n, d) = (rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=5));
        let dims = LayerDims {
            parts: n,
            token_dim: d,
            text_dim: rng.random_range(1..=4),
            experts: rng.random_range(1..=3),
            hidden: rng.random_range(1..=6),
        };
        let mut layer = init_layer_with(dims, i).map_err(|e| e.to_string())?;
        randomize(&mut layer, 1000 + i, 0.8);
        let h = Array3::from_shape_fn((f, n, d), |_| rng.random_range(-1.0..1.0));
        let nt = rng.random_range(0..=3);
        let text = rand_mat(&mut rng, nt, dims.text_dim, 1.0);
        let positional = i % 2 == 0;
        let got = [
            max3(&static_forward(&h, &layer.a_s).map_err(|e| e.to_string())?, &oracle_static(&h, &layer.a_s)),
            max3(&dynamic_forward(&h, &layer).map_err(|e| e.to_string())?, &oracle_dynamic(&h, &layer)),
            max3(
                &temporal_forward(&h, &text, &layer, positional).map_err(|e| e.to_string())?,
                &oracle_temporal(&h, &text, &layer, positional),
            ),
            {
                let rows = rng.random_range(1..=6);
                let x = rand_mat(&mut rng, rows, d, 1.5);
                max_abs_diff(&moe_forward(&x, &layer).map_err(|e| e.to_string())?, &oracle_moe(&x, &layer))
            },
        ];
        for (w, g) in worst.iter_mut().zip(got) {
            *w = w.max(g);
        }
    }
    let names = ["static", "dynamic", "temporal", "moe"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w < 1e-10, || format!("{name} branch off by {w:.2e}"))?;
    }
    Ok(format!(
        "50 instances each, max errors {}",
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

// ----------------------------------------------------------------------
// 4. static adjacency identity and permutation equivariance

fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    Mat::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]])
}

fn c4_static_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for seed in 0..20 {
        let layer = init_layer(12, 8, 4, 2, seed).map_err(|e| e.to_string())?;
        ensure(layer.a_s == Mat::eye(12), || "fresh A_s is not the identity".into())?;
        let h = Array3::from_shape_fn((5, 12, 8), |_| rng.sample::<f64, _>(StandardNormal));
        ensure(static_forward(&h, &layer.a_s).map_err(|e| e.to_string())? == h, || {
            format!("seed {seed}: E_s differs from H_s")
        })?;
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=12);
        let (f, d) = (rng.random_range(1..=6), rng.random_range(1..=8));
        let a = rand_mat(&mut rng, n, n, 1.0);
        let h = Array3::from_shape_fn((f, n, d), |_| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // (P A Pᵀ)[i, j] = A[perm i, perm j]; (P H)[f, i] = H[f, perm i].
        let pap = Mat::from_shape_fn((n, n), |(i, j)| a[[perm[i], perm[j]]]);
        let ph = Array3::from_shape_fn((f, n, d), |(fi, i, c)| h[[fi, perm[i], c]]);
        let lhs = static_forward(&ph, &pap).map_err(|e| e.to_string())?;
        let base = static_forward(&h, &a).map_err(|e| e.to_string())?;
        for fi in 0..f {
            let rhs = permute_rows(&base.index_axis(Axis(0), fi).to_owned(), &perm);
            worst = worst.max(max_abs_diff(&lhs.index_axis(Axis(0), fi).to_owned(), &rhs));
        }
    }
    ensure(worst < 1e-12, || format!("equivariance off by {worst:.2e}"))?;
    Ok(format!("identity exact on 20 layers, equivariance max error {worst:.1e}"))
}

// ----------------------------------------------------------------------
// 5. schedule

fn c5_schedule() -> Outcome {
    let sched = make_linear_schedule(1000, 0.0001, 0.02).map_err(|e| e.to_string())?;
    ensure(sched.beta.len() == 1000, || "schedule length".into())?;
    ensure((sched.beta[0] - 0.0001).abs() < 1e-15, || format!("β_1 = {}", sched.beta[0]))?;
    ensure((sched.beta[999] - 0.02).abs() < 1e-15, || format!("β_1000 = {}", sched.beta[999]))?;
    ensure(sched == DiffusionSchedule::default(), || "default schedule differs".into())?;
    ensure(sched.alpha_bar.windows(2).all(|w| w[1] < w[0]), || "ᾱ not strictly decreasing".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x0 = randn(&mut rng, 16, 325);
        let eps = randn(&mut rng, 16, 325);
        let mut x = q_sample(&x0, 1000, &eps, &sched).map_err(|e| e.to_string())?;
        let zeros = Mat::zeros(x0.dim());
        for t in (1..=1000).rev() {
            x = p_sample_step(&x, t, &x0, &zeros, &sched).map_err(|e| e.to_string())?;
        }
        let rel = (&x - &x0).mapv(|v| v * v).sum().sqrt() / x0.mapv(|v| v * v).sum().sqrt();
        worst = worst.max(rel);
    }
    ensure(worst < 1e-3, || format!("posterior iteration relative error {worst:.2e}"))?;
    Ok(format!("β endpoints exact, ᾱ decreasing, recovery error {worst:.1e}"))
}

// ----------------------------------------------------------------------
// 6. rotations

fn mat_err(a: &Mat3, b: &Mat3) -> f64 {
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (a[i][j] - b[i][j]).abs()).fold(0.0, f64::max)
}

fn c6_rotations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let axis: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let theta = rng.random_range(0.0..PI - 0.01);
        let v = [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta];
        let r = axis_angle_to_matrix(v).map_err(|e| e.to_string())?;
        let back = matrix_to_axis_angle(&r).map_err(|e| e.to_string())?;
        let r6 = Rot6D::from_matrix(&r);
        let r2 = rot6d_to_matrix(&r6).map_err(|e| e.to_string())?;
        let back6 = rot6d_to_axis_angle(&r6).map_err(|e| e.to_string())?;
        let e = (0..3)
            .map(|k| (back[k] - v[k]).abs().max((back6[k] - v[k]).abs()))
            .fold(mat_err(&r, &r2), f64::max);
        worst = worst.max(e);
        ensure(worst < 1e-9, || format!("rotation {i} ({v:?}) round-trip error {e:.2e}"))?;
    }
    Ok(format!("10000 rotations, max error {worst:.1e}"))
}

// ----------------------------------------------------------------------
// 7. metrics

fn cloud(data: Mat) -> FeatureCloud {
    FeatureCloud::new(data, Provenance::Generated)
}

fn c7_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let x = randn(&mut rng, 200, 16);
    let self_fid = fid(&cloud(x.clone()), &cloud(x)).map_err(|e| e.to_string())?;
    ensure(self_fid.abs() < 1e-6, || format!("FID(cloud, cloud) = {self_fid:e}"))?;

    let a = randn(&mut rng, 100_000, 1);
    let b = randn(&mut rng, 100_000, 1).mapv(|v| v + 1.0);
    let gauss = fid(&cloud(a), &cloud(b)).map_err(|e| e.to_string())?;
    ensure((gauss - 1.0).abs() < 0.05, || format!("1-D Gaussian FID {gauss}"))?;

    let pts = Mat::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).expect("shape");
    let div = diversity(&cloud(pts), 300, 0).map_err(|e| e.to_string())?;
    ensure(div == 4.0 / 3.0, || format!("diversity {div}"))?;

    let beats = [4.0, 11.0, 30.0, 42.0];
    let same = beat_align(&beats, &beats, 3.0).map_err(|e| e.to_string())?;
    ensure(same == 1.0, || format!("identical beats score {same}"))?;
    let off = beat_align(&[20.0], &[23.0], 3.0).map_err(|e| e.to_string())?;
    ensure((off - (-0.5f64).exp()).abs() < 1e-9, || format!("σ-offset beat score {off}"))?;

    let emb = randn(&mut rng, 320, 8);
    let top = r_precision_topk(&emb, &emb, 1, 1).map_err(|e| e.to_string())?;
    ensure(top[0] == 1.0, || format!("identity embedder Top-1 {}", top[0]))?;

    // Independent text embeddings: 10⁴ batches of 32.
    let m = randn(&mut rng, 320_000, 4);
    let t = randn(&mut rng, 320_000, 4);
    let null = r_precision_topk(&m, &t, 3, 2).map_err(|e| e.to_string())?;
    ensure((null[0] - 1.0 / 32.0).abs() < 0.02, || format!("null Top-1 {}", null[0]))?;
    ensure((null[2] - 3.0 / 32.0).abs() < 0.02, || format!("null Top-3 {}", null[2]))?;
    Ok(format!(
        "self FID {self_fid:.1e}, Gaussian FID {gauss:.4}, diversity 4/3, σ-offset {off:.6}, null Top-1 {:.4}",
        null[0]
    ))
}

// ----------------------------------------------------------------------
// 8. freeze policies

fn music_items(spec: &SyntheticSpec, text_dim: usize) -> Result<Vec<TrainItem>, String> {
    let corpus = make_synthetic_dataset(spec).map_err(|e| e.to_string())?;
    Ok(corpus.items(&HashEmbedder::new(text_dim, 32)))
}

fn c8_freeze() -> Outcome {
    let mc = tiny();
    let spec = SyntheticSpec { count: 8, frames: 8, condition: Some(ConditionKind::Music), ..Default::default() };
    let items = music_items(&spec, mc.text_dim)?;
    let mut model = build_model(&mc, 80).map_err(|e| e.to_string())?;
    // A few stage-1 steps move the zero-initialized output head so every
    // codec receives gradient.
    let pre = TrainConfig { steps: 20, batch_size: 2, lr_start: 3e-3, lr_end: 3e-3, model: mc.clone(), ..Default::default() };
    train_stage1(&items, &mut model, &pre, None).map_err(|e| e.to_string())?;
    let before = checksums(&model.params);

    let full = TrainConfig {
        stage: 2,
        stage1_checkpoint: Some("memory".into()),
        steps: 500,
        lr_start: 1e-3,
        lr_end: 1e-4,
        freeze: FreezePolicy::full(),
        ..pre.clone()
    };
    let out = train_stage2(&items, &model, &full, None).map_err(|e| e.to_string())?;
    let after = checksums(&out.model.params);
    let moved: Vec<&String> = before.keys().filter(|k| before[*k] != after[*k]).collect();
    ensure(moved.is_empty(), || format!("full freeze changed {moved:?}"))?;
    let fresh = attach_control_branch(&model, 2, ConditionKind::Music, 0, "").map_err(|e| e.to_string())?;
    ensure(checksums(&out.branch.params) != checksums(&fresh.params), || "branch did not train".into())?;

    let local = TrainConfig { steps: 20, freeze: FreezePolicy::local(&["left-hand", "right-hand"]), ..full };
    let out = train_stage2(&items, &model, &local, None).map_err(|e| e.to_string())?;
    let after = checksums(&out.model.params);
    let changed: BTreeSet<String> = before.keys().filter(|k| before[*k] != after[*k]).cloned().collect();
    let expect: BTreeSet<String> = ["left-hand", "right-hand"]
        .iter()
        .flat_map(|p| {
            ["encoder", "decoder"]
                .iter()
                .flat_map(move |k| ["weight", "bias"].map(|l| format!("codec.{k}.{p}.{l}")))
        })
        .collect();
    ensure(changed == expect, || format!("local unfreeze changed {changed:?}, expected {expect:?}"))?;
    Ok(format!("500 full-freeze steps: {} tensors unchanged; local unfreeze moved exactly {} hand codec tensors", before.len(), expect.len()))
}

// ----------------------------------------------------------------------
// 9. overfit

const OVERFIT_MAX_STEPS: usize = 5000;
const OVERFIT_SCHEDULE_STEPS: usize = 3000;

fn to_sequences(motions: &[Mat], like: &MotionSequence) -> Result<Vec<MotionSequence>, String> {
    motions
        .iter()
        .map(|m| MotionSequence::from_f64(like.layout.clone(), like.fps, m).map_err(|e| e.to_string()))
        .collect()
}

fn c9_overfit() -> Outcome {
    let mc = tiny();
    let spec = SyntheticSpec { archetypes: 8, tempos: 2, count: 16, frames: 8, ..Default::default() };
    let corpus = make_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let items = corpus.items(&HashEmbedder::new(mc.text_dim, 32));
    let mut model = build_model(&mc, 90).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: OVERFIT_SCHEDULE_STEPS.min(OVERFIT_MAX_STEPS),
        batch_size: 4,
        lr_start: 3e-3,
        lr_end: 3e-4,
        stop_below: Some(0.01),
        model: mc.clone(),
        ..Default::default()
    };
    let log = train_stage1(&items, &mut model, &cfg, None).map_err(|e| e.to_string())?;
    let first = log.initial_loss().ok_or("empty log")?;
    let ratio = log.tail_mean(50) / first;
    ensure(ratio < 0.01, || format!("loss ratio {ratio:.4} after {} steps", log.losses.len()))?;

    let (gen, gt) = overfit_samples(&model, &corpus.samples[0].motion, &items)?;
    let real = raw_features(&gt).map_err(|e| e.to_string())?;
    let fake = raw_features(&gen).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let noise_motions: Vec<Mat> = gt.iter().map(|m| randn(&mut rng, m.frames(), m.width())).collect();
    let noise = raw_features(&to_sequences(&noise_motions, &gt[0])?).map_err(|e| e.to_string())?;
    let fid_gen = fid(&cloud(fake), &cloud(real.clone())).map_err(|e| e.to_string())?;
    let fid_noise = fid(&cloud(noise), &cloud(real)).map_err(|e| e.to_string())?;
    ensure(fid_gen * 10.0 <= fid_noise, || format!("FID generated {fid_gen:.4} vs noise {fid_noise:.4}"))?;
    Ok(format!(
        "loss ratio {ratio:.4} at step {}, FID generated {fid_gen:.4} vs noise {fid_noise:.3}",
        log.losses.len()
    ))
}

fn overfit_samples(
    model: &Model,
    like: &MotionSequence,
    items: &[TrainItem],
) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>), String> {
    let texts: Vec<Mat> = items.iter().map(|i| i.text.clone()).collect();
    let frames = items[0].motion.nrows();
    let gen = generate(Generator::Backbone(model), &texts, None, frames, &DiffusionSchedule::default(), 92)
        .map_err(|e| e.to_string())?;
    let gt: Vec<Mat> = items.iter().map(|i| i.motion.clone()).collect();
    Ok((to_sequences(&gen, like)?, to_sequences(&gt, like)?))
}

// ----------------------------------------------------------------------
// 10. retrieval embedder

const RETRIEVAL_EPOCHS: usize = 100;

fn c10_retrieval() -> Outcome {
    let mk = |count, seed| {
        make_synthetic_dataset(&SyntheticSpec {
            archetypes: 8,
            tempos: 4,
            amplitudes: 4,
            count,
            frames: 32,
            seed,
            ..Default::default()
        })
        .map_err(|e| e.to_string())
    };
    let train = mk(512, 100)?;
    let held_out = mk(128, 101)?;
    let top1 = |nce: f64| -> Result<f64, String> {
        let mut cfg = RetrievalConfig::new(train.motions()[0].ncols());
        cfg.latent_dim = 32;
        cfg.weights.nce = nce;
        let (emb, _) = train_retrieval(&train.motions(), &train.captions(), cfg, RETRIEVAL_EPOCHS, 102)
            .map_err(|e| e.to_string())?;
        let caps = held_out.captions();
        let refs: Vec<&str> = caps.iter().map(|s| s.as_str()).collect();
        let m = emb.embed_motions(&held_out.motions()).map_err(|e| e.to_string())?;
        let t = emb.embed_texts(&refs).map_err(|e| e.to_string())?;
        Ok(r_precision_topk(&m, &t, 1, 103).map_err(|e| e.to_string())?[0])
    };
    let with_nce = top1(0.1)?;
    let without = top1(0.0)?;
    let detail = format!("held-out Top-1 {with_nce:.3} with InfoNCE, {without:.3} with λ_NCE = 0 ({RETRIEVAL_EPOCHS} epochs)");
    ensure(with_nce > 0.9, || detail.clone())?;
    ensure(without < 0.1, || detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------------
// 11. conditioning efficacy

const EFFICACY_STAGE1_STEPS: usize = 1000;
const EFFICACY_STAGE2_STEPS: usize = 1000;
const EFFICACY_SAMPLES: usize = 32;
// A short schedule keeps sampling affordable; β is scaled so ᾱ_T stays
// close to zero.
const EFFICACY_DIFFUSION_STEPS: usize = 100;

fn c11_efficacy() -> Outcome {
    let mc = tiny();
    let spec = SyntheticSpec {
        archetypes: 8,
        count: EFFICACY_SAMPLES,
        frames: 8,
        condition: Some(ConditionKind::Music),
        captions: CaptionStyle::Generic,
        ..Default::default()
    };
    let corpus = make_synthetic_dataset(&spec).map_err(|e| e.to_string())?;
    let items = corpus.items(&HashEmbedder::new(mc.text_dim, 32));
    let mut model = build_model(&mc, 110).map_err(|e| e.to_string())?;
    let s1 = TrainConfig {
        steps: EFFICACY_STAGE1_STEPS,
        batch_size: 4,
        lr_start: 3e-3,
        lr_end: 3e-4,
        model: mc.clone(),
        diffusion_steps: EFFICACY_DIFFUSION_STEPS,
        beta_min: 1e-3,
        beta_max: 0.2,
        ..Default::default()
    };
    train_stage1(&items, &mut model, &s1, None).map_err(|e| e.to_string())?;
    let s2 = TrainConfig {
        stage: 2,
        stage1_checkpoint: Some("memory".into()),
        steps: EFFICACY_STAGE2_STEPS,
        freeze: FreezePolicy::full(),
        ..s1
    };
    let sched = s2.schedule().map_err(|e| e.to_string())?;
    let out = train_stage2(&items, &model, &s2, None).map_err(|e| e.to_string())?;

    let texts: Vec<Mat> = items.iter().map(|i| i.text.clone()).collect();
    let tracks: Vec<Mat> = items.iter().map(|i| i.track.clone().expect("music track")).collect();
    let like = &corpus.samples[0].motion;
    let plain = generate(Generator::Backbone(&model), &texts, None, spec.frames, &sched, 111).map_err(|e| e.to_string())?;
    let steered = generate(Generator::Controlled(&model, &out.branch), &texts, Some(&tracks), spec.frames, &sched, 111)
        .map_err(|e| e.to_string())?;
    let gt: Vec<Mat> = items.iter().map(|i| i.motion.clone()).collect();
    let feats = |m: &[Mat]| -> Result<FeatureCloud, String> {
        Ok(cloud(raw_features(&to_sequences(m, like)?).map_err(|e| e.to_string())?))
    };
    let real = feats(&gt)?;
    let fid_plain = fid(&feats(&plain)?, &real).map_err(|e| e.to_string())?;
    let fid_steered = fid(&feats(&steered)?, &real).map_err(|e| e.to_string())?;
    let detail = format!("FID unconditioned {fid_plain:.4}, controlled {fid_steered:.4}, ratio {:.2}", fid_plain / fid_steered);
    ensure(fid_steered * 2.0 <= fid_plain, || detail.clone())?;
    Ok(detail)
}

// ----------------------------------------------------------------------
// 12. segmentation and outpainting

fn c12_windows() -> Outcome {
    let mut cases = 0;
    for len in 0..=130 {
        for window in 1..=16 {
            for stride in 1..=16 {
                let brute: Vec<std::ops::Range<usize>> = (0..=len)
                    .filter(|s| s % stride == 0 && s + window <= len)
                    .map(|s| s..s + window)
                    .collect();
                ensure(segment_ranges(len, window, stride) == brute, || format!("grid ({len}, {window}, {stride})"))?;
                cases += 1;
            }
        }
        for (w, st) in [(64, 64), (120, 30)] {
            let n = (0..=len).filter(|s| s % st == 0 && s + w <= len).count();
            ensure(segment_ranges(len, w, st).len() == n, || format!("({len}, {w}, {st})"))?;
        }
    }

    let sched = make_linear_schedule(6, 0.0001, 0.02).map_err(|e| e.to_string())?;
    let width = 3;
    let mut checked = 0;
    for (window, overlap) in [(64usize, 16usize), (120, 30)] {
        for total in [window, window + 1, 2 * window, 3 * window + 7, 5 * window - overlap] {
            let mut last: Vec<Option<Mat>> = Vec::new();
            let mut den = |x: &Mat, t: usize, k: usize| -> wholebody::Result<Mat> {
                let y = x.mapv(|v| (0.5 * v).tanh() + k as f64);
                if last.len() <= k {
                    last.resize(k + 1, None);
                }
                if t == 1 {
                    last[k] = Some(y.clone());
                }
                Ok(y)
            };
            let out = outpaint_sample(&mut den, total, window, overlap, width, &sched, 7).map_err(|e| e.to_string())?;
            ensure(out.dim() == (total, width), || format!("({window}, {overlap}) total {total}: shape {:?}", out.dim()))?;
            let stride = window - overlap;
            let mut starts = vec![0];
            while starts.last().unwrap() + window < total {
                starts.push(starts.last().unwrap() + stride);
            }
            ensure(last.len() == starts.len(), || format!("{} windows, expected {}", last.len(), starts.len()))?;
            let finals: Vec<Mat> = last.into_iter().map(|m| m.expect("t = 1 recorded")).collect();
            for (k, &st) in starts.iter().enumerate() {
                let end = (st + window).min(total);
                let own_from = if k == 0 { st } else { st + overlap };
                for f in own_from..end {
                    for c in 0..width {
                        let want = finals[k][[f - st, c]];
                        ensure((out[[f, c]] - want).abs() < 1e-12, || format!("window {k} frame {f} not its own sample"))?;
                    }
                }
                if k > 0 {
                    // Overlap rows equal the previous window's tail.
                    for j in 0..overlap.min(total - st) {
                        for c in 0..width {
                            let prev = finals[k - 1][[stride + j, c]];
                            ensure((out[[st + j, c]] - prev).abs() < 1e-12, || format!("overlap row {} of window {k}", st + j))?;
                        }
                    }
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{cases} grid cases, {checked} outpaint runs"))
}

// ----------------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "zero-bridge identity", c1_zero_bridge),
        (2, "gradient correctness", c2_gradients),
        (3, "MC-Attn branch oracles", c3_branch_oracles),
        (4, "static identity init", c4_static_identity),
        (5, "schedule facts", c5_schedule),
        (6, "rotation round-trips", c6_rotations),
        (7, "metric oracles", c7_metrics),
        (8, "freeze guarantees", c8_freeze),
        (9, "overfit smoke", c9_overfit),
        (10, "retrieval embedder", c10_retrieval),
        (11, "stage-2 conditioning efficacy", c11_efficacy),
        (12, "segmentation/outpainting arithmetic", c12_windows),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
