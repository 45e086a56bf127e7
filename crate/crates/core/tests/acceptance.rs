//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,3` restricts the run to the listed criteria.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddcsad::centroids::CentroidPair;
use ddcsad::dataset::{build_task, featurize, pool_features, BatchComposer, Corpus, Split};
use ddcsad::encoder::{crops_to_input, init_params, EncoderConfig, InputLayout, PooledClip};
use ddcsad::frontend::Role;
use ddcsad::losses::{
    bce_loss, combined_graph, combined_loss, ddcsad_loss, dsad_loss, BatchItem, ItemMeta, LabeledBatch,
    LossConfig, LossVariant,
};
use ddcsad::metrics::{auc, auc_ci, auc_sorted};
use ddcsad::pipeline::{run_target, sweep_anomaly_budget, SweepConfig, TargetRun};
use ddcsad::runspec::RunSpec;
use ddcsad::scoring::{fuse_score, select_alpha, standardize_distances};
use ddcsad::tensor::{grad_check, Graph, Tensor, Var};

type Check = std::result::Result<String, String>;

struct Line {
    id: u8,
    name: &'static str,
    budget_s: f64,
    soft: bool,
}

struct Report {
    failures: Vec<u8>,
    soft_failures: Vec<u8>,
}

impl Report {
    fn record(&mut self, line: &Line, secs: f64, result: Check) {
        let in_time = secs < line.budget_s;
        let (ok, detail) = match result {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let verdict = match (ok, line.soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "SOFT-FAIL",
        };
        let budget = if line.budget_s.is_finite() {
            format!("budget {:.0} s", line.budget_s)
        } else {
            "no time budget".into()
        };
        println!(
            "criterion {} [{verdict}] {}: {detail} ({secs:.1} s, {budget})",
            line.id, line.name
        );
        if !ok {
            if line.soft {
                self.soft_failures.push(line.id);
            } else {
                self.failures.push(line.id);
            }
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 1. loss hand values

fn item(z: Vec<f64>, p: f64, meta: ItemMeta) -> BatchItem {
    BatchItem { z, p, meta }
}

fn pair(c_p: Vec<f64>, c_n: Vec<f64>) -> CentroidPair {
    CentroidPair {
        c_p,
        c_n,
        epoch_computed: 0,
        member_counts: (1, 1),
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> std::result::Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{name}: got {got}, want {want}"))
    }
}

/// Scalar form and graph form of the same batch, with embeddings and logits
/// fed in as constants.
fn graph_value(batch: &LabeledBatch, centroids: Option<&CentroidPair>, config: &LossConfig) -> f64 {
    let mut g = Graph::new();
    let n = batch.len();
    let d = batch.items[0].z.len();
    let z: Vec<f64> = batch.items.iter().flat_map(|it| it.z.clone()).collect();
    let logit: Vec<f64> = batch.items.iter().map(|it| (it.p / (1.0 - it.p)).ln()).collect();
    let zv = g.constant(Tensor::new([n, d], z).unwrap());
    let lv = g.constant(Tensor::vector(logit));
    let pv = g.sigmoid(lv);
    let out = ddcsad::encoder::ForwardVars { z: zv, logit: lv, p: pv };
    let meta: Vec<ItemMeta> = batch.items.iter().map(|it| it.meta).collect();
    let loss = combined_graph(&mut g, &out, &meta, centroids, config).unwrap();
    g.value(loss).item().unwrap()
}

fn criterion_1() -> Check {
    const TOL: f64 = 1e-9;
    let cfg = |variant, eta, lambda| LossConfig { variant, eta, lambda };
    let mut checked = 0;
    let mut run = |name: &str, got: f64, want: f64| -> std::result::Result<(), String> {
        checked += 1;
        close(name, got, want, TOL)
    };

    let b = LabeledBatch::new(vec![item(vec![0.0], 0.5, ItemMeta::normal())]).unwrap();
    run("bce one normal", bce_loss(&b).unwrap(), 2f64.ln())?;
    run("bce one normal, graph", graph_value(&b, None, &cfg(LossVariant::Bce, 2.0, 1.0)), 2f64.ln())?;
    let b = LabeledBatch::new(vec![item(vec![0.0], 0.2, ItemMeta::outlier())]).unwrap();
    run("bce one outlier", bce_loss(&b).unwrap(), -(0.8f64.ln()))?;
    let bce3 = LabeledBatch::new(vec![
        item(vec![0.0], 0.3, ItemMeta::outlier()),
        item(vec![0.0], 0.9, ItemMeta::normal()),
        item(vec![0.0], 0.1, ItemMeta::anomalous()),
    ])
    .unwrap();
    let bce3_value = -(0.7f64.ln() + 0.9f64.ln() + 0.9f64.ln()) / 3.0;
    run("bce three items", bce_loss(&bce3).unwrap(), bce3_value)?;
    run("bce three items, graph", graph_value(&bce3, None, &cfg(LossVariant::Bce, 2.0, 1.0)), bce3_value)?;

    let c = vec![0.0, 0.0];
    let single = |z: Vec<f64>| pair(c.clone(), z);
    let b = LabeledBatch::new(vec![item(c.clone(), 0.5, ItemMeta::normal())]).unwrap();
    run("dsad normal at centre", dsad_loss(&b, &c, 1.0).unwrap(), 0.0)?;
    let b = LabeledBatch::new(vec![item(vec![2.0, 0.0], 0.5, ItemMeta::outlier())]).unwrap();
    run("dsad outlier at 2", dsad_loss(&b, &c, 1.0).unwrap(), 0.25)?;
    let b = LabeledBatch::new(vec![
        item(vec![1.0, 0.0], 0.5, ItemMeta::outlier()),
        item(vec![0.0, 3.0], 0.5, ItemMeta::normal()),
    ])
    .unwrap();
    run("dsad two items", dsad_loss(&b, &c, 2.0).unwrap(), 9.5)?;
    let g = graph_value(&b, Some(&single(vec![9.0, 9.0])), &cfg(LossVariant::Dsad, 2.0, 1.0));
    run("dsad two items, graph", g, 9.5)?;

    let b = LabeledBatch::new(vec![item(vec![0.0, 0.0], 0.5, ItemMeta::normal())]).unwrap();
    run("ddcsad normal", ddcsad_loss(&b, &pair(c.clone(), vec![1.0, 0.0]), 1.0).unwrap(), 1.0)?;
    let b = LabeledBatch::new(vec![item(vec![2.0, 0.0], 0.5, ItemMeta::outlier())]).unwrap();
    run("ddcsad outlier", ddcsad_loss(&b, &pair(c.clone(), vec![2.5, 0.0]), 1.0).unwrap(), 0.5)?;
    let geometry = pair(c.clone(), vec![1.5, 0.0]);
    let b = LabeledBatch::new(vec![
        item(vec![0.75, 0.4375f64.sqrt()], 0.3, ItemMeta::outlier()),
        item(vec![2.0, 0.0], 0.1, ItemMeta::anomalous()),
    ])
    .unwrap();
    run("ddcsad two items", ddcsad_loss(&b, &geometry, 2.0).unwrap(), 1.5)?;
    let g = graph_value(&b, Some(&geometry), &cfg(LossVariant::Ddcsad, 2.0, 1.0));
    run("ddcsad two items, graph", g, 1.5)?;

    // The three-item posterior batch placed on the two-item geometry: the
    // outlier and anomalous items contribute 1.5 · 2/3 and the normal on c_p
    // contributes 2/3 · 1/1.5².
    let b = LabeledBatch::new(vec![
        item(vec![0.75, 0.4375f64.sqrt()], 0.3, ItemMeta::outlier()),
        item(vec![0.0, 0.0], 0.9, ItemMeta::normal()),
        item(vec![2.0, 0.0], 0.1, ItemMeta::anomalous()),
    ])
    .unwrap();
    let metric = (1.0 + 1.0) / 3.0 + (2.0 / 3.0) / 2.25 + (2.0 / 3.0) * 0.5;
    let full = cfg(LossVariant::BceDdcsad, 2.0, 1.0);
    run("bce+ddcsad", combined_loss(&b, Some(&geometry), &full).unwrap(), bce3_value + metric)?;
    run("bce+ddcsad, graph", graph_value(&b, Some(&geometry), &full), bce3_value + metric)?;
    let zero = cfg(LossVariant::BceDdcsad, 2.0, 0.0);
    run("lambda = 0", combined_loss(&b, Some(&geometry), &zero).unwrap(), bce_loss(&b).unwrap())?;
    let additive = bce_loss(&b).unwrap() + ddcsad_loss(&b, &geometry, 2.0).unwrap();
    close("lambda = 1 additivity", combined_loss(&b, Some(&geometry), &full).unwrap(), additive, 1e-12)?;

    run("fuse alpha=0.1", fuse_score(0.9, 0.5, 0.1).unwrap(), 0.46)?;
    run("fuse alpha=1", fuse_score(0.3, 0.8, 1.0).unwrap(), 0.7)?;
    run("fuse alpha=0", fuse_score(0.3, 0.8, 0.0).unwrap(), 0.8)?;
    let d = standardize_distances(&[2.0, 4.0, 6.0]);
    for (got, want) in d.iter().zip([0.0, 0.5, 1.0]) {
        run("standardize [2,4,6]", *got, want)?;
    }
    if standardize_distances(&[3.0; 4]) != [0.0; 4] {
        return Err("equal distances must standardize to zeros".into());
    }
    Ok(format!("{checked} hand values within {TOL:e}"))
}

// ---------------------------------------------------------------------------
// 2. gradient suite

const GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> ddcsad::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

type Primitive = (&'static str, Vec<usize>, f64, f64, Box<dyn Fn(&mut Graph, Var, u64) -> ddcsad::Result<Var>>);

fn primitives() -> Vec<Primitive> {
    fn other(seed: u64, shape: &[usize]) -> Tensor {
        random_tensor(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 7), shape, -1.0, 1.0)
    }
    vec![
        ("add", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let b = g.constant(other(s, &[3, 4]));
            let y = g.add(x, b)?;
            weighted_sum(g, y, s)
        })),
        ("add (row broadcast)", vec![4], -1.0, 1.0, Box::new(|g, x, s| {
            let a = g.constant(other(s, &[3, 4]));
            let y = g.add(a, x)?;
            weighted_sum(g, y, s)
        })),
        ("sub", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let b = g.constant(other(s, &[3, 4]));
            let y = g.sub(b, x)?;
            weighted_sum(g, y, s)
        })),
        ("mul", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let b = g.constant(other(s, &[3, 4]));
            let y = g.mul(x, b)?;
            let y = g.mul(y, x)?;
            weighted_sum(g, y, s)
        })),
        ("scale", vec![5], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.scale(x, -2.5);
            weighted_sum(g, y, s)
        })),
        ("matmul (left)", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let b = g.constant(other(s, &[4, 2]));
            let y = g.matmul(x, b)?;
            weighted_sum(g, y, s)
        })),
        ("matmul (right)", vec![4, 2], -1.0, 1.0, Box::new(|g, x, s| {
            let a = g.constant(other(s, &[3, 4]));
            let y = g.matmul(a, x)?;
            weighted_sum(g, y, s)
        })),
        ("conv2d (input)", vec![2, 2, 4, 5], -1.0, 1.0, Box::new(|g, x, s| {
            let w = g.constant(other(s, &[3, 2, 3, 3]));
            let b = g.constant(other(s + 1, &[3]));
            let y = g.conv2d(x, w, b)?;
            weighted_sum(g, y, s)
        })),
        ("conv2d (weight)", vec![3, 2, 1, 3], -1.0, 1.0, Box::new(|g, x, s| {
            let input = g.constant(other(s, &[2, 2, 3, 6]));
            let b = g.constant(other(s + 1, &[3]));
            let y = g.conv2d(input, x, b)?;
            weighted_sum(g, y, s)
        })),
        ("conv2d (bias)", vec![3], -1.0, 1.0, Box::new(|g, x, s| {
            let input = g.constant(other(s, &[2, 2, 4, 4]));
            let w = g.constant(other(s + 1, &[3, 2, 3, 3]));
            let y = g.conv2d(input, w, x)?;
            weighted_sum(g, y, s)
        })),
        ("relu", vec![7], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.relu(x);
            weighted_sum(g, y, s)
        })),
        ("sigmoid", vec![7], -3.0, 3.0, Box::new(|g, x, s| {
            let y = g.sigmoid(x);
            weighted_sum(g, y, s)
        })),
        ("softplus", vec![7], -3.0, 3.0, Box::new(|g, x, s| {
            let y = g.softplus(x);
            weighted_sum(g, y, s)
        })),
        ("log", vec![7], 0.5, 2.0, Box::new(|g, x, s| {
            let y = g.log(x);
            weighted_sum(g, y, s)
        })),
        ("square", vec![7], -2.0, 2.0, Box::new(|g, x, s| {
            let y = g.square(x);
            weighted_sum(g, y, s)
        })),
        ("recip", vec![7], 0.5, 2.0, Box::new(|g, x, s| {
            let y = g.recip(x);
            weighted_sum(g, y, s)
        })),
        ("clamp_min", vec![7], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.clamp_min(x, 0.1);
            weighted_sum(g, y, s)
        })),
        ("sum", vec![3, 4], -1.0, 1.0, Box::new(|g, x, _| Ok(g.sum(x)))),
        ("mean", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.square(x);
            let m = g.mean(y);
            let k = other(s, &[1]).data()[0];
            Ok(g.scale(m, k))
        })),
        ("sum_last_axis", vec![3, 4], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.sum_last_axis(x)?;
            weighted_sum(g, y, s)
        })),
        ("global_average_pool", vec![2, 3, 4, 2], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.global_average_pool(x)?;
            weighted_sum(g, y, s)
        })),
        ("avg_pool2d 2x2", vec![2, 2, 4, 6], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.avg_pool2d(x, 2, 2)?;
            weighted_sum(g, y, s)
        })),
        ("avg_pool2d 1x2", vec![1, 3, 1, 8], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.avg_pool2d(x, 1, 2)?;
            weighted_sum(g, y, s)
        })),
        ("reshape", vec![2, 6], -1.0, 1.0, Box::new(|g, x, s| {
            let y = g.reshape(x, [3, 4])?;
            weighted_sum(g, y, s)
        })),
    ]
}

fn tiny_encoders() -> Vec<EncoderConfig> {
    vec![
        EncoderConfig {
            conv_channels: vec![3],
            kernel_size: 3,
            embedding_dim: 4,
            pooling_between_blocks: true,
            input_pool: [32, 16],
            layout: InputLayout::BandChannels,
        },
        EncoderConfig {
            conv_channels: vec![2, 3],
            kernel_size: 3,
            embedding_dim: 3,
            pooling_between_blocks: true,
            input_pool: [32, 16],
            layout: InputLayout::Image,
        },
    ]
}

/// Worst relative error of every parameter tensor's gradient for one loss
/// through one randomly initialized encoder.
fn encoder_loss_error(config: &EncoderConfig, variant: LossVariant, seed: u64) -> ddcsad::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(config, seed)?;
    let [c, h, w] = config.input_shape();
    let crop_len = c * h * w;
    let metas = [
        ItemMeta::normal(),
        ItemMeta::normal(),
        ItemMeta::outlier(),
        ItemMeta::outlier(),
        ItemMeta::anomalous(),
        ItemMeta::normal(),
    ];
    let crops: Vec<Vec<f64>> = (0..metas.len())
        .map(|_| (0..crop_len).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = crops.iter().map(|v| v.as_slice()).collect();
    let input = crops_to_input(&refs, config)?;
    let d = config.embedding_dim;
    let centroids = pair(
        (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    );
    let loss = LossConfig {
        variant,
        eta: 2.0,
        lambda: 1.0,
    };
    let mut worst = 0.0f64;
    for j in 0..params.params.len() {
        let f = |g: &mut Graph, x: Var| -> ddcsad::Result<Var> {
            let vars: Vec<Var> = params
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| if i == j { x } else { g.constant(p.tensor.clone()) })
                .collect();
            let inp = g.constant(input.clone());
            let out = params.forward_graph(g, &vars, inp)?;
            combined_graph(g, &out, &metas, Some(&centroids), &loss)
        };
        // Zero-initialized biases sit on relu kinks less often after a nudge.
        let mut point = params.params[j].tensor.clone();
        for v in point.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let err = grad_check(f, &point, GRAD_STEP)?;
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn criterion_2() -> Check {
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checks = 0;
    let mut note = |err: f64, what: String| -> std::result::Result<(), String> {
        checks += 1;
        if err.is_nan() || err >= GRAD_TOL {
            return Err(format!("{what}: relative error {err:e}"));
        }
        if err > worst.0 {
            worst = (err, what);
        }
        Ok(())
    };
    for (name, shape, lo, hi, f) in primitives() {
        for seed in 0..10u64 {
            let point = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, lo, hi);
            let err = grad_check(|g, x| f(g, x, seed), &point, GRAD_STEP).map_err(|e| e.to_string())?;
            note(err, format!("{name} seed {seed}"))?;
        }
    }
    for config in tiny_encoders() {
        for variant in [LossVariant::Bce, LossVariant::Dsad, LossVariant::Ddcsad, LossVariant::BceDdcsad] {
            for seed in 0..10u64 {
                let err = encoder_loss_error(&config, variant, seed).map_err(|e| e.to_string())?;
                note(err, format!("{} through {:?} encoder, seed {seed}", variant.name(), config.layout))?;
            }
        }
    }
    Ok(format!(
        "{checks} checks, max relative error {:.2e} ({}) < {GRAD_TOL:e}",
        worst.0, worst.1
    ))
}

// ---------------------------------------------------------------------------
// 3. AUC oracle and confidence interval

fn brute_force_auc(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut total = 0.0;
    for a in anomalous {
        for n in normal {
            total += if a > n { 1.0 } else { 0.0 };
        }
    }
    total / (normal.len() * anomalous.len()) as f64
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut with_ties = 0;
    for instance in 0..100 {
        let tied = instance % 2 == 0;
        let (nn, na) = (rng.gen_range(1..=50), rng.gen_range(1..=50));
        let mut draw = |n: usize, shift: i32| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if tied {
                        (rng.gen_range(0..6) + shift) as f64 / 5.0
                    } else {
                        rng.gen::<f64>() + shift as f64 / 5.0
                    }
                })
                .collect()
        };
        let normal = draw(nn, 0);
        let anomalous = draw(na, 2);
        let oracle = brute_force_auc(&normal, &anomalous);
        let pairwise = auc(&normal, &anomalous).map_err(|e| e.to_string())?;
        let sorted = auc_sorted(&normal, &anomalous).map_err(|e| e.to_string())?;
        if (pairwise - oracle).abs() > 1e-12 || (sorted - oracle).abs() > 1e-12 {
            return Err(format!(
                "instance {instance}: oracle {oracle}, pairwise {pairwise}, sorted {sorted}"
            ));
        }
        if normal.iter().any(|n| anomalous.contains(n)) {
            with_ties += 1;
        }
    }
    let fixed = [
        (vec![0.1, 0.2], vec![0.8, 0.9], 1.0),
        (vec![0.5, 0.5], vec![0.5, 0.5], 0.0),
        (vec![0.4, 0.6], vec![0.5, 0.7], 0.75),
    ];
    for (n, a, want) in fixed {
        close("auc example", auc(&n, &a).unwrap(), want, 1e-12)?;
    }

    // "about 400 samples of normal and anomalous sounds" per evaluation set.
    let (target, n) = (0.0206, 400);
    let (lo, hi) = auc_ci(0.9269, n, n);
    let half = (hi - lo) / 2.0;
    let rel = (half - target).abs() / target;
    // Count per class that reproduces the half-width exactly.
    let (mut a, mut b) = (10.0f64, 10_000.0f64);
    for _ in 0..60 {
        let m = (a + b) / 2.0;
        let (lo, hi) = auc_ci(0.9269, m as usize, m as usize);
        if (hi - lo) / 2.0 > target {
            a = m;
        } else {
            b = m;
        }
    }
    let detail = format!(
        "100 instances ({with_ties} with cross-class ties) match to 1e-12; half-width {half:.4} at {n}/{n} vs {target} ({:.1}% off, implied count ≈ {:.0})",
        rel * 100.0,
        a
    );
    if rel > 0.10 {
        return Err(detail);
    }
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. determinism through the binary

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = r#"
[corpus]
normal_clips_per_id = 12
test_normal_clips_per_id = 10
anomaly_clips_per_id = 10
clip_seconds = 9.0

[train]
total_iterations = 300
centroid_epoch = 100

[task]
target_type = "hum"
target_id = 0
"#;
    let spec_path = dir.path().join("run.toml");
    std::fs::write(&spec_path, spec).map_err(|e| e.to_string())?;
    let run = |name: &str| -> std::result::Result<std::path::PathBuf, String> {
        let out = dir.path().join(name);
        let output = Command::new(env!("CARGO_BIN_EXE_ddcsad"))
            .args(["train", "--quiet", "--seed", "5", "--spec"])
            .arg(&spec_path)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!(
                "train exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr)
            ));
        }
        Ok(out.join("hum_id00"))
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut compared = Vec::new();
    for file in ["model.ckpt", "scores.csv", "validation.csv", "history.csv"] {
        let read = |d: &Path| std::fs::read(d.join(file)).map_err(|e| format!("{file}: {e}"));
        let (x, y) = (read(&a)?, read(&b)?);
        if x != y {
            return Err(format!("{file} differs between two identical runs"));
        }
        compared.push(format!("{file} ({} B)", x.len()));
    }
    Ok(format!("two seeded `train` runs, bit-identical {}", compared.join(", ")))
}

// ---------------------------------------------------------------------------
// 8. invariants

fn streaming_mean(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; vs[0].len()];
    for (k, v) in vs.iter().enumerate() {
        for (mi, x) in m.iter_mut().zip(v) {
            *mi += (x - *mi) / (k + 1) as f64;
        }
    }
    m
}

fn criterion_8(corpus: &Corpus, store: &ddcsad::dataset::FeatureStore) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut done = Vec::new();

    for _ in 0..20 {
        let d = rng.gen_range(1..8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            let n = rng.gen_range(1..40);
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
        };
        let (normal, negative) = (draw(&mut rng), draw(&mut rng));
        let pair = CentroidPair::from_embeddings(&normal, &negative, 0).map_err(|e| e.to_string())?;
        for (got, want) in pair.c_p.iter().zip(streaming_mean(&normal)).chain(pair.c_n.iter().zip(streaming_mean(&negative))) {
            close("centroid mean", *got, want, 1e-10)?;
        }
    }
    done.push("centroid mean");

    for _ in 0..50 {
        let d: Vec<f64> = (0..rng.gen_range(2..30)).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let s = standardize_distances(&d);
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min != 0.0 || max != 1.0 {
            return Err(format!("standardized range [{min}, {max}]"));
        }
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] && s[i] >= s[j] {
                    return Err("standardization broke the ordering".into());
                }
            }
        }
    }
    done.push("standardization range/ordering");

    let mut leaks = 0;
    for (ty, id) in corpus.machine_ids() {
        for k in [0, 1, 64] {
            let task = build_task(corpus, &ty, id, k, 8).map_err(|e| e.to_string())?;
            let mut composer = BatchComposer::new(&task, 64, 8).map_err(|e| e.to_string())?;
            let want = if k > 0 { [32, 31, 1] } else { [32, 32, 0] };
            for _ in 0..10 {
                let batch = composer.next_batch();
                let count = |m: ItemMeta| batch.iter().filter(|e| e.meta == m).count();
                let got = [count(ItemMeta::normal()), count(ItemMeta::outlier()), count(ItemMeta::anomalous())];
                if got != want {
                    return Err(format!("{ty}:{id} k={k}: batch composition {got:?}, want {want:?}"));
                }
            }
            let ids = |v: &[usize]| -> HashSet<String> { v.iter().map(|&i| corpus.clips[i].clip_id.clone()).collect() };
            let train = ids(&task.training_clips());
            let mut held = ids(&task.evaluation);
            held.extend(ids(&task.validation));
            leaks += train.intersection(&held).count();
            if task.outlier_set.iter().any(|&i| {
                let c = &corpus.clips[i];
                c.machine_type == ty && c.machine_id == id
            }) {
                return Err(format!("{ty}:{id}: outlier set holds target clips"));
            }
        }
    }
    if leaks > 0 {
        return Err(format!("{leaks} clips in both training and held-out pools"));
    }
    done.push("batch composition counts");
    done.push("no train/eval leakage");

    // Label flip on labeled items: the flipped item under swapped centroids
    // costs what the original costs, and each term's exponent flips.
    for _ in 0..20 {
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a, b): (Vec<f64>, Vec<f64>) = ((0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(), (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let sq = |c: &[f64]| z.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let eta = rng.gen_range(0.5..3.0);
        let normal = LabeledBatch::new(vec![item(z.clone(), 0.5, ItemMeta::normal())]).unwrap();
        let flipped = LabeledBatch::new(vec![item(z.clone(), 0.5, ItemMeta::anomalous())]).unwrap();
        close("dsad +1", dsad_loss(&normal, &a, eta).unwrap(), eta * sq(&a), 1e-9)?;
        close("dsad -1", dsad_loss(&flipped, &a, eta).unwrap(), eta / sq(&a), 1e-9)?;
        let ab = pair(a.clone(), b.clone());
        let ba = pair(b.clone(), a.clone());
        close("ddcsad +1", ddcsad_loss(&normal, &ab, eta).unwrap(), eta * (sq(&a) + 1.0 / sq(&b)), 1e-9)?;
        close("ddcsad -1", ddcsad_loss(&flipped, &ab, eta).unwrap(), eta * (1.0 / sq(&a) + sq(&b)), 1e-9)?;
        close("ddcsad flip", ddcsad_loss(&flipped, &ba, eta).unwrap(), ddcsad_loss(&normal, &ab, eta).unwrap(), 1e-9)?;
    }
    done.push("label-flip exponent symmetry");

    for _ in 0..50 {
        let (p, d) = (rng.gen_range(0.0..1.0), rng.gen::<f64>());
        if fuse_score(p, d, 1.0).unwrap() != 1.0 - p || fuse_score(p, d, 0.0).unwrap() != d {
            return Err(format!("alpha endpoints at p={p}, d'={d}"));
        }
    }
    let p: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
    let d: Vec<f64> = (0..40).map(|_| rng.gen::<f64>()).collect();
    let roles: Vec<Role> = (0..40).map(|i| if i % 3 == 0 { Role::Anomalous } else { Role::Normal }).collect();
    let (alpha, best) = select_alpha(&p, &d, &roles).map_err(|e| e.to_string())?;
    for i in 0..=10 {
        let a = i as f64 / 10.0;
        let s: Vec<f64> = p.iter().zip(&d).map(|(&p, &d)| fuse_score(p, d, a).unwrap()).collect();
        let split = |want: Role| -> Vec<f64> { s.iter().zip(&roles).filter(|(_, r)| **r == want).map(|(v, _)| *v).collect() };
        let v = brute_force_auc(&split(Role::Normal), &split(Role::Anomalous));
        if v > best || (v == best && a < alpha) {
            return Err(format!("grid α {alpha} ({best}) beaten by {a} ({v})"));
        }
    }
    done.push("alpha endpoints and grid");

    // Energy detector and spectral distance per target id, over its test clips.
    let mut worst_energy = (0.0, String::new());
    let mut weakest_margin = (f64::INFINITY, String::new());
    for (ty, id) in corpus.machine_ids() {
        let test: Vec<usize> = (0..corpus.len())
            .filter(|&i| {
                let c = &corpus.clips[i];
                c.machine_type == ty && c.machine_id == id && c.split != Split::Train
            })
            .collect();
        let mut energy = (Vec::new(), Vec::new());
        let mut spectra = (Vec::new(), Vec::new());
        for &i in &test {
            let samples = corpus.render(i).map_err(|e| e.to_string())?.samples;
            let e = samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64;
            let f = &store.features[i];
            let mut s = vec![0.0; f.mel_bins()];
            for t in 0..f.frame_count {
                for (acc, v) in s.iter_mut().zip(f.row(t)) {
                    *acc += *v as f64 / f.frame_count as f64;
                }
            }
            if corpus.clips[i].role == Role::Anomalous {
                energy.1.push(e);
                spectra.1.push(s);
            } else {
                energy.0.push(e);
                spectra.0.push(s);
            }
        }
        let up = brute_force_auc(&energy.0, &energy.1);
        let neg = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| -x).collect() };
        let down = brute_force_auc(&neg(&energy.0), &neg(&energy.1));
        let best = up.max(down);
        if best > worst_energy.0 {
            worst_energy = (best, format!("{ty}:{id}"));
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (normal, anomalous) = &spectra;
        let mut nn = Vec::new();
        for i in 0..normal.len() {
            for j in i + 1..normal.len() {
                nn.push(dist(&normal[i], &normal[j]));
            }
        }
        let mut an = Vec::new();
        for a in anomalous {
            for n in normal {
                an.push(dist(a, n));
            }
        }
        let margin = mean(&an) / mean(&nn);
        if margin < weakest_margin.0 {
            weakest_margin = (margin, format!("{ty}:{id}"));
        }
    }
    if worst_energy.0 >= 0.95 {
        return Err(format!("energy detector reaches AUC {:.3} on {}", worst_energy.0, worst_energy.1));
    }
    if weakest_margin.0 <= 1.0 {
        return Err(format!(
            "anomaly-normal spectral distance does not exceed normal-normal on {} (ratio {:.3})",
            weakest_margin.1, weakest_margin.0
        ));
    }
    Ok(format!(
        "{}; energy detector max AUC {:.3} ({}) < 0.95; anomaly/normal spectral distance ratio ≥ {:.3} ({}); module suites run under `cargo test`",
        done.join(", "),
        worst_energy.0,
        worst_energy.1,
        weakest_margin.0,
        weakest_margin.1
    ))
}

// ---------------------------------------------------------------------------
// 4–6. experiments on the default corpus

const SEEDS: u64 = 5;

/// Pool-adjacent-violators fit of a non-decreasing sequence.
fn isotonic(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat(v).take(n)).collect()
}

struct Setup {
    corpus: Corpus,
    clips: Vec<PooledClip>,
    spec: RunSpec,
    targets: Vec<(String, u32)>,
    feature_secs: f64,
}

fn setup() -> ddcsad::Result<(Setup, ddcsad::dataset::FeatureStore)> {
    let spec = RunSpec::default();
    let (loaded, feature_secs) = timed(|| -> ddcsad::Result<_> {
        let corpus = spec.load_corpus()?;
        let store = featurize(&corpus, &spec.frontend)?;
        let clips = pool_features(&store, spec.encoder.input_pool)?;
        Ok((corpus, store, clips))
    });
    let (corpus, store, clips) = loaded?;
    let targets = spec.targets(&corpus)?;
    Ok((
        Setup {
            corpus,
            clips,
            spec,
            targets,
            feature_secs,
        },
        store,
    ))
}

fn fresh_runs(s: &Setup, variant: LossVariant) -> ddcsad::Result<Vec<Vec<TargetRun>>> {
    let mut by_seed = Vec::new();
    for seed in 0..SEEDS {
        let mut spec = s.spec.clone().with_seed(seed);
        spec.loss.variant = variant;
        let config = spec.train_config();
        let digest = spec.digest();
        let mut runs = Vec::new();
        for (ty, id) in &s.targets {
            runs.push(run_target(
                &s.corpus,
                &s.clips,
                (ty, *id),
                0,
                &spec.encoder,
                &config,
                &spec.scoring,
                None,
                &digest,
            )?);
        }
        by_seed.push(runs);
    }
    Ok(by_seed)
}

fn eval_auc(run: &TargetRun) -> f64 {
    run.evaluation.evaluation.pooled.auc
}

fn criterion_4(s: &Setup, runs: &[Vec<TargetRun>]) -> Check {
    let mut lines = Vec::new();
    let mut worst_median = (f64::INFINITY, String::new());
    let mut worst_seed = (f64::INFINITY, String::new());
    for (t, (ty, id)) in s.targets.iter().enumerate() {
        let aucs: Vec<f64> = runs.iter().map(|r| eval_auc(&r[t])).collect();
        let m = median(&aucs);
        let lo = aucs.iter().copied().fold(f64::INFINITY, f64::min);
        lines.push(format!("{ty}:{id} {m:.3}"));
        if m < worst_median.0 {
            worst_median = (m, format!("{ty}:{id}"));
        }
        if lo < worst_seed.0 {
            worst_seed = (lo, format!("{ty}:{id}"));
        }
    }
    println!("  per-target median AUC: {}", lines.join(", "));
    let detail = format!(
        "{} targets x {SEEDS} seeds; lowest median {:.3} ({}), lowest single seed {:.3} ({})",
        s.targets.len(),
        worst_median.0,
        worst_median.1,
        worst_seed.0,
        worst_seed.1
    );
    if worst_median.0 >= 0.85 && worst_seed.0 >= 0.75 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Median over seeds of the per-seed mean AUC across targets.
fn summary_auc(runs: &[Vec<TargetRun>]) -> (f64, Vec<f64>) {
    let per_seed: Vec<f64> = runs.iter().map(|r| mean(&r.iter().map(eval_auc).collect::<Vec<_>>())).collect();
    (median(&per_seed), per_seed)
}

fn criterion_5(full: &[Vec<TargetRun>], dsad: &[Vec<TargetRun>]) -> Check {
    let (a, pa) = summary_auc(full);
    let (b, pb) = summary_auc(dsad);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    let detail = format!("median target-mean AUC bce+ddcsad {a:.4} [{}] vs dsad {b:.4} [{}]", fmt(&pa), fmt(&pb));
    if a >= b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6(s: &Setup, base: Vec<Vec<TargetRun>>) -> ddcsad::Result<Check> {
    let budgets = SweepConfig::default().budgets;
    // [seed][budget] mean over targets
    let mut per_seed = Vec::new();
    for (seed, runs) in base.into_iter().enumerate() {
        let spec = s.spec.clone().with_seed(seed as u64);
        let config = spec.train_config();
        let digest = spec.digest();
        let mut sums = vec![0.0; budgets.len()];
        let n = runs.len();
        for (run, (ty, id)) in runs.into_iter().zip(&s.targets) {
            let sweep = sweep_anomaly_budget(
                &s.corpus,
                &s.clips,
                (ty, *id),
                &budgets,
                &spec.encoder,
                &config,
                &spec.scoring,
                Some(run),
                &digest,
            )?;
            for (acc, row) in sums.iter_mut().zip(&sweep.rows) {
                *acc += row.outcome.auc;
            }
        }
        per_seed.push(sums.into_iter().map(|v| v / n as f64).collect::<Vec<f64>>());
    }
    let medians: Vec<f64> = (0..budgets.len())
        .map(|b| median(&per_seed.iter().map(|r| r[b]).collect::<Vec<_>>()))
        .collect();
    let smoothed = isotonic(&medians);
    let raw_drops = medians.windows(2).filter(|w| w[1] < w[0]).count();
    let monotone = smoothed.windows(2).all(|w| w[1] >= w[0]);
    let gain = medians[budgets.len() - 1] - medians[0];
    let row: Vec<String> = budgets.iter().zip(&medians).map(|(k, m)| format!("k={k} {m:.4}")).collect();
    println!("  median target-mean AUC by budget: {}", row.join(", "));
    let detail = format!(
        "k=64 minus k=0 = {gain:+.4} (need ≥ 0.02); isotonic fit non-decreasing: {monotone}; raw medians decrease at {raw_drops} of {} steps",
        budgets.len() - 1
    );
    Ok(if gain >= 0.02 && monotone { Ok(detail) } else { Err(detail) })
}

fn main() {
    let only: Option<HashSet<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest flags (e.g. `--list`) are not supported; listing prints nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let want = |id: u8| only.as_ref().map_or(true, |s| s.contains(&id));
    let mut report = Report {
        failures: Vec::new(),
        soft_failures: Vec::new(),
    };
    let line = |id, name, budget_s, soft| Line { id, name, budget_s, soft };

    if want(1) {
        let (r, t) = timed(criterion_1);
        report.record(&line(1, "loss correctness", 1.0, false), t, r);
    }
    if want(2) {
        let (r, t) = timed(criterion_2);
        report.record(&line(2, "gradient suite", 120.0, false), t, r);
    }
    if want(3) {
        let (r, t) = timed(criterion_3);
        report.record(&line(3, "AUC oracle", 10.0, false), t, r);
    }
    if want(7) {
        let (r, t) = timed(criterion_7);
        report.record(&line(7, "determinism", f64::INFINITY, false), t, r);
    }
    if [4, 5, 6, 8].iter().any(|&i| want(i)) {
        let (s, store) = match setup() {
            Ok(v) => v,
            Err(e) => {
                println!("corpus setup failed: {e}");
                std::process::exit(1);
            }
        };
        println!(
            "  default corpus: {} clips, {} targets, features in {:.1} s",
            s.corpus.len(),
            s.targets.len(),
            s.feature_secs
        );
        if want(8) {
            let (r, t) = timed(|| criterion_8(&s.corpus, &store));
            report.record(&line(8, "invariant suites", f64::INFINITY, false), t, r);
        }
        drop(store);
        if want(4) || want(5) || want(6) {
            let (full, t_full) = timed(|| fresh_runs(&s, LossVariant::BceDdcsad));
            let full = match full {
                Ok(v) => v,
                Err(e) => {
                    println!("criterion 4 [FAIL] training failed: {e}");
                    std::process::exit(1);
                }
            };
            if want(4) {
                let secs = t_full + s.feature_secs;
                report.record(&line(4, "end-to-end separability", 1800.0, false), secs, criterion_4(&s, &full));
            }
            if want(5) {
                let (dsad, t) = timed(|| fresh_runs(&s, LossVariant::Dsad));
                let r = match dsad {
                    Ok(d) => criterion_5(&full, &d),
                    Err(e) => Err(e.to_string()),
                };
                report.record(&line(5, "ablation ordering (soft)", f64::INFINITY, true), t, r);
            }
            if want(6) {
                let (r, t) = timed(|| criterion_6(&s, full));
                let r = r.unwrap_or_else(|e| Err(e.to_string()));
                report.record(&line(6, "anomaly-injection trend", 5400.0, false), t + t_full, r);
            }
        }
    }

    if !report.soft_failures.is_empty() {
        println!("soft criteria not met: {:?}", report.soft_failures);
    }
    if !report.failures.is_empty() {
        println!("failed criteria: {:?}", report.failures);
        std::process::exit(1);
    }
    println!("all requested criteria passed");
}
