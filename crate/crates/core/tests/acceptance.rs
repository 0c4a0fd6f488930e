//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout so it shows up even when output capture is on.
//!
//! The tests share one CPU budget, so they take a common lock and run one at
//! a time; the timing limits below are measured inside that lock.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvscreen::data::{
    crop_offset, generate_synthetic_exam, split_by_patient, standardize_orientation, ClassMix, CropRule, DataMode,
    Exam, ExamSet, ExamSource, ImageRecord, PatientSplit, Preprocessor, Scale, SplitSpec, SynthConfig,
    SyntheticSource, View,
};
use mvscreen::metrics::{auc_binary, cohen_kappa, entropy, PredictionDistribution};
use mvscreen::model::{
    column_forward, forward_graph, layer_skip_plan, ColumnSpec, Layer, Mode, ModelConfig, ModelParams, TrainNoise,
};
use mvscreen::saliency::{prediction_entropy, saliency};
use mvscreen::tensor::gradcheck::{finite_diff_check, relative_error};
use mvscreen::tensor::{ConvSpec, Graph, PoolSpec, Tensor, TensorError, Var};
use mvscreen::train::{
    adam_step, fraction_sweep, resolution_sweep, train, AdamState, Prediction, SweepRow, TrainConfig,
    BEST_CHECKPOINT, EPOCH_LOG,
};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{name} failed: {detail}");
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero so ReLU kinks stay outside the difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values on a 0.01 grid, shuffled, so pooling has no near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// `sum(r * v)` for a fixed random `r`, turning any output into a scalar.
fn weighted_sum(g: &mut Graph<f64>, v: Var, r: &Tensor<f64>) -> Result<Var, TensorError> {
    let m = g.mul_const(v, r)?;
    Ok(g.sum(m))
}

type OpCheck = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    fn check(f: impl Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>, x: &Tensor<f64>) -> f64 {
        finite_diff_check(f, x, 1e-4).unwrap().max_rel_error
    }
    vec![
        (
            "add",
            Box::new(|rng| {
                let (x, y, r) = (uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let b = g.leaf(y.clone(), true);
                    let s = g.add(a, b)?;
                    weighted_sum(g, s, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "mul",
            Box::new(|rng| {
                let (x, y, r) = (uniform(rng, &[5], -1.0, 1.0), uniform(rng, &[5], -1.0, 1.0), uniform(rng, &[5], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let b = g.leaf(y.clone(), true);
                    let s = g.mul(b, a)?;
                    weighted_sum(g, s, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "add_const/scale",
            Box::new(|rng| {
                let (x, c, r) = (uniform(rng, &[4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0));
                let k = rng.random_range(-2.0..2.0);
                let f = |g: &mut Graph<f64>, a: Var| {
                    let s = g.add_const(a, &c)?;
                    let s = g.scale(s, k);
                    weighted_sum(g, s, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "concat",
            Box::new(|rng| {
                let (x, y, r) = (uniform(rng, &[3], -1.0, 1.0), uniform(rng, &[2], -1.0, 1.0), uniform(rng, &[8], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let b = g.leaf(y.clone(), false);
                    let s = g.concat(&[b, a, a])?;
                    weighted_sum(g, s, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let (x, r) = (off_zero(rng, &[3, 4]), uniform(rng, &[3, 4], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let s = g.relu(a);
                    weighted_sum(g, s, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "conv2d",
            Box::new(|rng| {
                let spec = ConvSpec {
                    kernel_h: rng.random_range(1..4),
                    kernel_w: rng.random_range(1..4),
                    stride_h: rng.random_range(1..3),
                    stride_w: rng.random_range(1..3),
                    in_maps: rng.random_range(1..3),
                    out_maps: rng.random_range(1..3),
                };
                let (h, w) = (rng.random_range(4..8), rng.random_range(4..8));
                let x = uniform(rng, &[spec.in_maps, h, w], -1.0, 1.0);
                let wt = uniform(rng, &spec.weight_shape(), -1.0, 1.0);
                let b = uniform(rng, &[spec.out_maps], -1.0, 1.0);
                let (oh, ow) = spec.output_extent(h, w).unwrap();
                let r = uniform(rng, &[spec.out_maps, oh, ow], -1.0, 1.0);
                let wrt_input = |g: &mut Graph<f64>, a: Var| {
                    let (wv, bv) = (g.leaf(wt.clone(), true), g.leaf(b.clone(), true));
                    let y = g.conv2d(a, wv, bv, spec)?;
                    weighted_sum(g, y, &r)
                };
                let wrt_weight = |g: &mut Graph<f64>, a: Var| {
                    let (xv, bv) = (g.leaf(x.clone(), true), g.leaf(b.clone(), true));
                    let y = g.conv2d(xv, a, bv, spec)?;
                    weighted_sum(g, y, &r)
                };
                let wrt_bias = |g: &mut Graph<f64>, a: Var| {
                    let (xv, wv) = (g.leaf(x.clone(), true), g.leaf(wt.clone(), true));
                    let y = g.conv2d(xv, wv, a, spec)?;
                    weighted_sum(g, y, &r)
                };
                check(wrt_input, &x).max(check(wrt_weight, &wt)).max(check(wrt_bias, &b))
            }),
        ),
        (
            "maxpool2d",
            Box::new(|rng| {
                let spec = PoolSpec::square(rng.random_range(1..4), rng.random_range(1..4));
                let (h, w) = (rng.random_range(4..9), rng.random_range(4..9));
                let x = distinct(rng, &[2, h, w]);
                let (oh, ow) = spec.output_extent(h, w).unwrap();
                let r = uniform(rng, &[2, oh, ow], -1.0, 1.0);
                let f = |g: &mut Graph<f64>, a: Var| {
                    let y = g.maxpool2d(a, spec)?;
                    weighted_sum(g, y, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "global_avg_pool",
            Box::new(|rng| {
                let (x, r) = (uniform(rng, &[3, 4, 5], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let y = g.global_avg_pool(a)?;
                    weighted_sum(g, y, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "dense",
            Box::new(|rng| {
                let (x, wt, b, r) = (
                    uniform(rng, &[6], -1.0, 1.0),
                    uniform(rng, &[4, 6], -1.0, 1.0),
                    uniform(rng, &[4], -1.0, 1.0),
                    uniform(rng, &[4], -1.0, 1.0),
                );
                let wrt_input = |g: &mut Graph<f64>, a: Var| {
                    let (wv, bv) = (g.leaf(wt.clone(), true), g.leaf(b.clone(), true));
                    let y = g.dense(a, wv, bv)?;
                    weighted_sum(g, y, &r)
                };
                let wrt_weight = |g: &mut Graph<f64>, a: Var| {
                    let (xv, bv) = (g.leaf(x.clone(), true), g.leaf(b.clone(), true));
                    let y = g.dense(xv, a, bv)?;
                    weighted_sum(g, y, &r)
                };
                let wrt_bias = |g: &mut Graph<f64>, a: Var| {
                    let (xv, wv) = (g.leaf(x.clone(), true), g.leaf(wt.clone(), true));
                    let y = g.dense(xv, wv, a)?;
                    weighted_sum(g, y, &r)
                };
                check(wrt_input, &x).max(check(wrt_weight, &wt)).max(check(wrt_bias, &b))
            }),
        ),
        (
            "softmax",
            Box::new(|rng| {
                let (x, r) = (uniform(rng, &[3], -3.0, 3.0), uniform(rng, &[3], -1.0, 1.0));
                let f = |g: &mut Graph<f64>, a: Var| {
                    let y = g.softmax(a)?;
                    weighted_sum(g, y, &r)
                };
                check(f, &x)
            }),
        ),
        (
            "cross_entropy",
            Box::new(|rng| {
                let x = uniform(rng, &[3], -3.0, 3.0);
                let label = rng.random_range(0..3);
                let f = move |g: &mut Graph<f64>, a: Var| {
                    let p = g.softmax(a)?;
                    g.cross_entropy(p, label)
                };
                check(f, &x)
            }),
        ),
        (
            "entropy",
            Box::new(|rng| {
                let x = uniform(rng, &[3], -3.0, 3.0);
                let f = |g: &mut Graph<f64>, a: Var| {
                    let p = g.softmax(a)?;
                    Ok(g.entropy(p))
                };
                check(f, &x)
            }),
        ),
    ]
}

fn tiny_config() -> ModelConfig {
    ModelConfig { scale: Scale::Eighth, input_height: 64, input_width: 48, width_divisor: 8, hidden_units: 16 }
}

fn tiny_inputs(rng: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    std::array::from_fn(|_| uniform(rng, &[1, 64, 48], -2.0, 2.0))
}

fn model_loss(params: &ModelParams<f64>, views: &[Tensor<f64>; 4], label: usize) -> f64 {
    let mut pass = forward_graph(params, views.clone().map(Arc::new), Mode::Eval, false, false).unwrap();
    let l = pass.graph.cross_entropy(pass.probs, label).unwrap();
    pass.graph.value(l).data()[0]
}

/// Largest relative error between backprop and central differences over a
/// sample of coordinates in every parameter tensor and every input view.
fn end_to_end_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: ModelParams<f64> = ModelParams::init(tiny_config(), seed).unwrap();
    let views = tiny_inputs(&mut rng);
    let label = (seed % 3) as usize;
    let mut pass = forward_graph(&params, views.clone().map(Arc::new), Mode::Eval, true, true).unwrap();
    let l = pass.graph.cross_entropy(pass.probs, label).unwrap();
    pass.graph.backward(l).unwrap();
    let param_grads: Vec<Tensor<f64>> = pass
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| pass.graph.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let input_grads: Vec<Tensor<f64>> = pass.inputs.iter().map(|&v| pass.graph.take_grad(v).unwrap()).collect();

    let mut worst: f64 = 0.0;
    for (i, grad) in param_grads.iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..grad.len());
            let x0 = params.tensors()[i].data()[j];
            let h = 1e-5 * x0.abs().max(1.0);
            let mut probe = params.clone();
            Arc::make_mut(&mut probe.tensors_mut()[i]).data_mut()[j] = x0 + h;
            let up = model_loss(&probe, &views, label);
            Arc::make_mut(&mut probe.tensors_mut()[i]).data_mut()[j] = x0 - h;
            let down = model_loss(&probe, &views, label);
            worst = worst.max(relative_error(grad.data()[j], (up - down) / (2.0 * h)));
        }
    }
    for (v, grad) in input_grads.iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..grad.len());
            let h = 1e-5 * views[v].data()[j].abs().max(1.0);
            let mut probe = views.clone();
            probe[v].data_mut()[j] += h;
            let up = model_loss(&params, &probe, label);
            probe[v].data_mut()[j] -= 2.0 * h;
            let down = model_loss(&params, &probe, label);
            worst = worst.max(relative_error(grad.data()[j], (up - down) / (2.0 * h)));
        }
    }
    worst
}

#[test]
fn gradient_suite() {
    let _guard = serial();
    let start = Instant::now();
    let mut worst_op = BTreeMap::new();
    for (name, check) in op_checks() {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
            worst = worst.max(check(&mut rng));
        }
        worst_op.insert(name, worst);
    }
    let e2e = (0..3).map(end_to_end_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let op_max = worst_op.values().copied().fold(0.0, f64::max);
    let pass = op_max < 1e-4 && e2e < 1e-3 && secs < 120.0;
    verdict(
        "gradient suite",
        pass,
        &format!("{} ops x 20 seeds, worst op error {op_max:.2e}, end-to-end {e2e:.2e}, {secs:.1}s; {worst_op:?}", worst_op.len()),
    );
}

/// Independent walk of the column description: valid windows with floor
/// division, stopping at the first layer that no longer fits.
fn oracle_trace(height: usize, width: usize) -> Vec<(usize, usize, usize)> {
    // (kind, window, stride, maps); maps 0 keeps the current count.
    let column: &[(char, usize, usize, usize)] = &[
        ('c', 3, 2, 32),
        ('p', 3, 3, 0),
        ('c', 3, 2, 64),
        ('c', 3, 1, 64),
        ('c', 3, 1, 64),
        ('p', 2, 2, 0),
        ('c', 3, 1, 128),
        ('c', 3, 1, 128),
        ('c', 3, 1, 128),
        ('p', 2, 2, 0),
        ('c', 3, 1, 128),
        ('c', 3, 1, 128),
        ('c', 3, 1, 128),
        ('p', 2, 2, 0),
        ('c', 3, 1, 256),
        ('c', 3, 1, 256),
        ('c', 3, 1, 256),
    ];
    let (mut h, mut w, mut maps) = (height, width, 1);
    let mut out = Vec::new();
    for &(_, k, s, m) in column {
        if k > h || k > w {
            break;
        }
        h = (h - k) / s + 1;
        w = (w - k) / s + 1;
        if m > 0 {
            maps = m;
        }
        out.push((maps, h, w));
    }
    out
}

#[test]
fn shape_trace() {
    let _guard = serial();
    let expected_full: Vec<(usize, usize)> = vec![
        (1299, 999),
        (433, 333),
        (216, 166),
        (214, 164),
        (212, 162),
        (106, 81),
        (104, 79),
        (102, 77),
        (100, 75),
        (50, 37),
        (48, 35),
        (46, 33),
        (44, 31),
        (22, 15),
        (20, 13),
        (18, 11),
        (16, 9),
    ];
    let full = layer_skip_plan(Scale::Full).unwrap();
    let full_spatial: Vec<(usize, usize)> = full.trace.iter().map(|&(_, h, w)| (h, w)).collect();
    let mut pass = full_spatial == expected_full
        && full.embedding_len() == 256
        && !full.is_truncated()
        && full.column == ColumnSpec::standard()
        && full.trace == oracle_trace(2600, 2000);
    let mut detail = format!("x1 retains {} layers, embedding {}", full.retained, full.embedding_len());
    for scale in [Scale::Half, Scale::Quarter, Scale::Eighth] {
        let plan = layer_skip_plan(scale).unwrap();
        let (h, w) = scale.crop_extent();
        let oracle = oracle_trace(h, w);
        let ok = plan.trace == oracle && plan.embedding_len() == oracle.last().unwrap().0;
        pass &= ok;
        detail.push_str(&format!("; x{scale} {h}x{w} keeps {} -> {:?}", plan.retained, plan.trace.last().unwrap()));
    }
    // The plan must also be what the network actually runs.
    let params: ModelParams = ModelParams::init(ModelConfig::for_scale(Scale::Eighth), 0).unwrap();
    let (h, w) = Scale::Eighth.crop_extent();
    let emb = column_forward(&params, View::LeftCc, &Tensor::full(&[1, h, w], 0.5)).unwrap();
    pass &= emb.shape() == [params.plan().embedding_len()];
    pass &= params.plan().layers().iter().all(|l| match l {
        Layer::Conv(c) => c.kernel_h == 3,
        Layer::MaxPool(_) => true,
    });
    verdict("shape trace", pass, &detail);
}

#[test]
fn overfit_small_cohort() {
    let _guard = serial();
    let source = SyntheticSource::cohort(64, 11, ClassMix::balanced(), SynthConfig::default());
    let all: Vec<usize> = (0..source.len()).collect();
    let set = ExamSet::new(&source, &all);
    let pre = Preprocessor::new(Scale::Eighth, Scale::Eighth).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-5, batch_size: 4, max_epochs: 200, seed: 3, target_val_mac_auc: Some(0.95), ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(set, set, &pre, &cfg, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let first = out.log[0].train_loss;
    let reached = out.best_val.mac_auc;
    let pass = reached >= 0.95 && out.log.len() <= 200 && (first - 3f64.ln()).abs() <= 0.1 && secs < 1800.0;
    verdict(
        "overfit",
        pass,
        &format!(
            "training macAUC {reached:.4} at epoch {}, first-epoch loss {first:.4} (ln 3 = {:.4}), lr {}, {secs:.0}s",
            out.best_epoch,
            3f64.ln(),
            cfg.learning_rate
        ),
    );
}

struct FractionRun {
    split: PatientSplit,
    rows: Vec<SweepRow>,
}

/// 1000 balanced exams with one exam per patient split 600/200/200; the full
/// fraction of the sweep doubles as the generalization run.
fn fraction_run() -> &'static FractionRun {
    static RUN: OnceLock<FractionRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let source = SyntheticSource::cohort_with_repeats(
            1000,
            2,
            ClassMix::balanced(),
            SynthConfig { margin: 200, ..SynthConfig::default() },
            0.0,
        );
        let spec = SplitSpec { train_fraction: 0.6, validation_fraction: 0.2, test_fraction: 0.2 };
        let split = split_by_patient(&source.infos(), &spec).unwrap();
        let pre = Preprocessor::new(Scale::Eighth, Scale::Eighth).unwrap();
        let cfg = TrainConfig { learning_rate: 1e-5, width_divisor: 4, max_epochs: 30, seed: 1, ..TrainConfig::default() };
        let rows = fraction_sweep(&source, &split, &[0.1, 0.5, 1.0], &pre, &cfg, Prediction::Tta { crops: 10, seed: 5 }, 30.0)
            .unwrap();
        FractionRun { split, rows }
    })
}

#[test]
fn generalization() {
    let _guard = serial();
    let run = fraction_run();
    let row = &run.rows[2];
    let mac = row.report.mac_auc();
    let (hc, kept) = match &row.report.high_confidence {
        Some(h) => (h.mac_auc(), h.kept_fraction),
        None => (f64::NAN, [f64::NAN; 3]),
    };
    let sizes = (run.split.train.len(), run.split.validation.len(), run.split.test.len());
    let pass = sizes == (600, 200, 200)
        && mac >= 0.85
        && hc >= mac
        && kept.iter().all(|k| (0.20..=0.40).contains(k));
    verdict(
        "generalization",
        pass,
        &format!(
            "split {sizes:?}, test macAUC {mac:.4}, HC-macAUC {hc:.4}, kept {:.3}/{:.3}/{:.3}, best epoch {}{}",
            kept[0],
            kept[1],
            kept[2],
            row.best_epoch,
            row.note.as_deref().map(|n| format!(", note: {n}")).unwrap_or_default()
        ),
    );
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn kappa_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut table = [[0.0f64; 3]; 3];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0 / n;
    }
    let observed: f64 = (0..3).map(|c| table[c][c]).sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..3).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    let chance: f64 = (0..3).map(|c| rows[c] * cols[c]).sum();
    (observed - chance) / (1.0 - chance)
}

#[test]
fn metric_oracles() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut auc_ok = 0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.random_range(2..=1000);
        // Half the instances draw from a small grid to force ties.
        let tied = rng.random_bool(0.5);
        let scores: Vec<f64> =
            (0..n).map(|_| if tied { f64::from(rng.random_range(0..20u8)) } else { rng.random() }).collect();
        let p = rng.random_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        instances += 1;
        auc_ok += usize::from(auc_binary(&scores, &labels).unwrap() == brute_force_auc(&scores, &labels));
    }
    let h_err = (entropy(&PredictionDistribution::uniform()) - 3f64.ln()).abs();
    let mut kappa_worst: f64 = 0.0;
    let mut kappa_cases = 0;
    while kappa_cases < 100 {
        let n = rng.random_range(5..300);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = a.iter().map(|&x| if rng.random_bool(0.6) { x } else { rng.random_range(0..3) }).collect();
        let Ok(k) = cohen_kappa(&a, &b) else { continue };
        kappa_cases += 1;
        kappa_worst = kappa_worst.max((k - kappa_oracle(&a, &b)).abs());
    }
    let pass = auc_ok == 200 && h_err <= 1e-9 && kappa_worst <= 1e-12;
    verdict(
        "metric oracles",
        pass,
        &format!("AUC exact on {auc_ok}/200, |H(uniform) - ln 3| = {h_err:.1e}, kappa worst {kappa_worst:.1e} over 100 pairs"),
    );
}

fn flipped(record: &ImageRecord, view: View) -> ImageRecord {
    // Orientation standardization mirrors right views; borrow it as a flip.
    let as_right = ImageRecord { view: View::RightCc, ..record.clone() };
    ImageRecord { view, ..standardize_orientation(&as_right).unwrap() }
}

/// Exam whose views are replaced per `(target, source, mirror)`.
fn rebuild(exam: &Exam, plan: &[(View, View, bool)]) -> Exam {
    let mut views = BTreeMap::new();
    for &(target, source, mirror) in plan {
        let r = &exam.views[&source][0];
        let r = if mirror { flipped(r, target) } else { ImageRecord { view: target, ..r.clone() } };
        views.insert(target, vec![r]);
    }
    Exam::new(exam.info.clone(), views).unwrap()
}

fn embeddings(params: &ModelParams, pre: &Preprocessor, exam: &Exam) -> [Tensor<f32>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let views = pre.prepare(exam, DataMode::Validation, &mut rng).unwrap();
    let pass = forward_graph(params, views.map(Arc::new), Mode::Eval, false, false).unwrap();
    View::ALL.map(|v| pass.embedding(v).clone())
}

fn tied_after_adam() -> (bool, String) {
    let cfg = ModelConfig { scale: Scale::Eighth, input_height: 64, input_width: 48, width_divisor: 8, hidden_units: 16 };
    let mut params: ModelParams = ModelParams::init(cfg, 5).unwrap();
    let mut state = AdamState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for step in 0..100u64 {
        let views: [Arc<Tensor<f32>>; 4] =
            std::array::from_fn(|_| Arc::new(Tensor::from_fn(&[1, 64, 48], |_| rng.random_range(-1.0..1.0))));
        let noise = TrainNoise { input_noise_std: 0.01, dropout: 0.2, seed: step };
        let mut pass = forward_graph(&params, views, Mode::Train(noise), true, false).unwrap();
        let loss = pass.graph.cross_entropy(pass.probs, (step % 3) as usize).unwrap();
        pass.graph.backward(loss).unwrap();
        let grads: Vec<Tensor<f32>> = pass
            .params
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| pass.graph.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam_step(params.tensors_mut(), &grads, &mut state, 1e-3).unwrap();
    }
    let bits = |ts: &[Arc<Tensor<f32>>]| -> Vec<u32> { ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect() };
    let mut ok = true;
    for (l, r) in [(View::LeftCc, View::RightCc), (View::LeftMlo, View::RightMlo)] {
        ok &= bits(params.column(l)) == bits(params.column(r));
        let x = Tensor::from_fn(&[1, 64, 48], |i| ((i * 31) % 17) as f32 / 17.0);
        let (el, er) = (column_forward(&params, l, &x).unwrap(), column_forward(&params, r, &x).unwrap());
        ok &= el.data().iter().map(|v| v.to_bits()).eq(er.data().iter().map(|v| v.to_bits()));
    }
    // CC and MLO columns train separately and must have drifted apart.
    ok &= bits(params.column(View::LeftCc)) != bits(params.column(View::LeftMlo));
    (ok, "tied columns bit-identical after 100 Adam steps".into())
}

fn mirrored_embeddings() -> (bool, String) {
    let cfg = SynthConfig { margin: 48, ..SynthConfig::default() };
    let exam = generate_synthetic_exam(21, 0, &cfg).unwrap();
    let pre = Preprocessor::new(Scale::Eighth, Scale::Eighth).unwrap();
    let params: ModelParams = ModelParams::init(ModelConfig::for_scale(Scale::Eighth).with_width_divisor(4), 8).unwrap();

    // Right views are mirror images of the left ones.
    let pair = rebuild(
        &exam,
        &[
            (View::LeftCc, View::LeftCc, false),
            (View::RightCc, View::LeftCc, true),
            (View::LeftMlo, View::LeftMlo, false),
            (View::RightMlo, View::LeftMlo, true),
        ],
    );
    let h = embeddings(&params, &pre, &pair);
    let pair_ok = h[0] == h[1] && h[2] == h[3];

    // Swapping the breasts permutes the embeddings.
    let swapped = rebuild(
        &exam,
        &[
            (View::LeftCc, View::RightCc, true),
            (View::RightCc, View::LeftCc, true),
            (View::LeftMlo, View::RightMlo, true),
            (View::RightMlo, View::LeftMlo, true),
        ],
    );
    let (a, b) = (embeddings(&params, &pre, &exam), embeddings(&params, &pre, &swapped));
    let swap_ok = a[0] == b[1] && a[1] == b[0] && a[2] == b[3] && a[3] == b[2];
    (pair_ok && swap_ok, format!("mirrored pair equal {pair_ok}, swapped breasts permuted {swap_ok}"))
}

fn softmax_shift() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let logits = uniform(&mut rng, &[3], -30.0, 30.0);
        let c = rng.random_range(-100.0..100.0);
        let probs = |t: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(t, false);
            let p = g.softmax(x).unwrap();
            g.value(p).clone()
        };
        let (p, q) = (probs(logits.clone()), probs(logits.map(|v| v + c)));
        worst = p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    (worst < 1e-12, format!("softmax shift worst {worst:.1e}"))
}

fn crop_jitter() -> (bool, String) {
    let rule = CropRule::full(DataMode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut v_min, mut v_max, mut h_min, mut h_max) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    let mut inside = true;
    for _ in 0..10_000 {
        let o = crop_offset(2800, 2200, &rule, &mut rng).unwrap();
        v_min = v_min.min(o.t_vertical);
        v_max = v_max.max(o.t_vertical);
        h_min = h_min.min(o.t_horizontal);
        h_max = h_max.max(o.t_horizontal);
        inside &= o.top + 2600 <= 2800 && o.left + 2000 <= 2200;
    }
    let ok = inside
        && (-100..=-95).contains(&v_min)
        && (95..=100).contains(&v_max)
        && (0..=5).contains(&h_min)
        && (95..=100).contains(&h_max);
    (ok, format!("jitter t_v [{v_min},{v_max}], t_h [{h_min},{h_max}]"))
}

fn deterministic_runs() -> (bool, String) {
    let source = SyntheticSource::cohort(36, 12, ClassMix::balanced(), SynthConfig { margin: 24, ..SynthConfig::default() });
    let split = split_by_patient(&source.infos(), &SplitSpec { train_fraction: 0.6, validation_fraction: 0.4, test_fraction: 0.0 })
        .unwrap();
    let pre = Preprocessor::new(Scale::Eighth, Scale::Eighth).unwrap();
    let cfg = TrainConfig { width_divisor: 8, hidden_units: 32, max_epochs: 3, learning_rate: 1e-4, seed: 4, ..TrainConfig::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for d in &dirs {
        train(ExamSet::new(&source, &split.train), ExamSet::new(&source, &split.validation), &pre, &cfg, Some(d.path()))
            .unwrap();
        files.push((
            std::fs::read(d.path().join(BEST_CHECKPOINT)).unwrap(),
            std::fs::read(d.path().join(EPOCH_LOG)).unwrap(),
        ));
    }
    let ok = files[0] == files[1];
    (ok, format!("repeated runs byte-identical {ok} ({} checkpoint bytes)", files[0].0.len()))
}

#[test]
fn invariances() {
    let _guard = serial();
    let parts = [tied_after_adam(), mirrored_embeddings(), softmax_shift(), crop_jitter(), deterministic_runs()];
    let pass = parts.iter().all(|(ok, _)| *ok);
    let detail: Vec<&str> = parts.iter().map(|(_, d)| d.as_str()).collect();
    verdict("invariances", pass, &detail.join("; "));
}

#[test]
fn saliency_oracle() {
    let _guard = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params: ModelParams<f64> = ModelParams::init(tiny_config(), 17).unwrap();
    let views = tiny_inputs(&mut rng);
    let maps = saliency(&params, views.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.random_range(0..4);
        let j = rng.random_range(0..64 * 48);
        let h = 1e-6;
        let mut probe = views.clone();
        probe[v].data_mut()[j] += h;
        let up = prediction_entropy(&params, probe.clone()).unwrap();
        probe[v].data_mut()[j] -= 2.0 * h;
        let down = prediction_entropy(&params, probe).unwrap();
        let numeric = ((up - down) / (2.0 * h)).abs();
        worst = worst.max(relative_error(maps[v].values.data()[j], numeric));
    }
    let mut zero_head = params.clone();
    *zero_head.get_mut("head.weight").unwrap() = Arc::new(Tensor::zeros(&[3, 16]));
    let zero = saliency(&zero_head, views).unwrap().iter().all(|m| m.values.data().iter().all(|&x| x == 0.0));
    let pass = worst < 1e-3 && zero;
    verdict("saliency", pass, &format!("worst relative error {worst:.2e} at 20 pixels, zero head gives zero maps {zero}"));
}

#[test]
fn sweep_trends() {
    let _guard = serial();
    let run = fraction_run();
    let macs: Vec<f64> = run.rows.iter().map(|r| r.report.mac_auc()).collect();
    let drops: Vec<f64> = macs.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    let fraction_ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.02);

    let source = SyntheticSource::cohort_with_repeats(
        150,
        3,
        ClassMix::balanced(),
        SynthConfig { scale: Scale::Full, ..SynthConfig::default() },
        0.0,
    );
    let split = split_by_patient(&source.infos(), &SplitSpec { train_fraction: 0.6, validation_fraction: 0.2, test_fraction: 0.2 })
        .unwrap();
    let cfg = TrainConfig { learning_rate: 3e-4, batch_size: 1, width_divisor: 4, max_epochs: 6, seed: 1, ..TrainConfig::default() };
    let rows = resolution_sweep(
        &source,
        &split,
        &[Scale::Full, Scale::Eighth],
        Scale::Full,
        &cfg,
        Prediction::Tta { crops: 10, seed: 5 },
        30.0,
        256 << 20,
    )
    .unwrap();
    let (full, eighth) = (rows[0].report.mac_auc(), rows[1].report.mac_auc());
    let resolution_ok = full >= eighth - 0.02;
    verdict(
        "sweep trends",
        fraction_ok && resolution_ok,
        &format!(
            "fractions 10/50/100% macAUC {:.4}/{:.4}/{:.4}; x1 {full:.4} vs x1/8 {eighth:.4}",
            macs[0], macs[1], macs[2]
        ),
    );
}
