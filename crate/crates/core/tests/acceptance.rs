//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cupe::data::{make_dataset, DatasetConfig, Manifest};
use cupe::metrics::{align, class_stats, collapse, confusion, f1_macro, gp, per, AlignOp, AlignmentResult};
use cupe::model::{group_snapshot, EncoderState, ModelConfig};
use cupe::nn::functional::{self, AttentionParams};
use cupe::nn::gradcheck::grad_check_five_point;
use cupe::nn::{ConvGeometry, ParamGroup, Tape, Tensor, Var};
use cupe::objectives::{silence_loss, CtcTarget, SilenceMask};
use cupe::phonemap::PhonemeInventory;
use cupe::train::{
    evaluate_corpus, finetune, finetune_from_scratch, pretrain_ssl, train_supervised, Corpus, TrainConfig, TrainOutcome,
};
use cupe::train::supervised::batch_gradients;
use cupe::window::{self, cosine_weight, StitchMode, StitchPlan, WindowConfig};

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_dists(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let k = *shape.last().unwrap();
    let mut t = Tensor::uniform(shape, 2.0, r);
    for row in t.data_mut().chunks_mut(k) {
        row.iter_mut().for_each(|v| *v = v.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    functional::log_softmax(t)
}

// Shape oracle.

fn shapes() -> Check {
    let cfg = ModelConfig {
        base_channels: 8,
        ..ModelConfig::default()
    };
    let model = EncoderState::build(cfg, 1).unwrap();
    let x = Tensor::uniform(&[1, 1, 1920], 0.5, &mut rng(1));
    let t = Instant::now();
    let trace = model.trace_shapes(&x).unwrap();
    let emb = model.encode_window(&x, false, 0).unwrap();
    let elapsed = t.elapsed();
    let lens: Vec<usize> = trace.iter().filter(|(n, _)| *n == "pyramid").map(|(_, s)| s[2]).collect();
    let long = ModelConfig {
        window: WindowConfig::with_window_ms(360),
        ..ModelConfig::desk(4)
    };
    let long_model = EncoderState::build(long, 1).unwrap();
    let long_emb = long_model.encode_window(&Tensor::uniform(&[1, 1, 5760], 0.5, &mut rng(2)), false, 0).unwrap();
    let pass = lens == [275, 55, 19, 10] && emb.shape() == [1, 10, 512] && long_emb.shape()[1] == 28 && elapsed < Duration::from_secs(1);
    check(
        pass,
        format!("pyramid {lens:?}, embeddings {:?}, 5760-sample window -> {} frames, {elapsed:.2?}", emb.shape(), long_emb.shape()[1]),
    )
}

// Parameter budget.

fn param_count() -> Check {
    let r = EncoderState::build(ModelConfig::default(), 0).unwrap().param_report();
    let pass = (25_000_000..=35_000_000).contains(&r.total) && (10_400_000..=15_600_000).contains(&r.transformer_layers);
    check(pass, format!("total {} trainable, transformer layers {}", r.total, r.transformer_layers))
}

// CTC against exhaustive enumeration.

fn ctc_by_enumeration(lp: &Tensor, target: &[usize]) -> f64 {
    let (frames, width) = (lp.dim(0), lp.dim(1));
    let blank = width - 1;
    let paths = width.pow(frames as u32);
    let mut total = 0.0;
    for code in 0..paths {
        let mut c = code;
        let mut path = Vec::with_capacity(frames);
        for _ in 0..frames {
            path.push(c % width);
            c /= width;
        }
        let mut collapsed = Vec::new();
        for (t, &k) in path.iter().enumerate() {
            if k != blank && (t == 0 || path[t - 1] != k) {
                collapsed.push(k);
            }
        }
        if collapsed == target {
            let logp: f64 = path.iter().enumerate().map(|(t, &k)| lp.data()[t * width + k]).sum();
            total += logp.exp();
        }
    }
    -total.ln()
}

fn ctc_oracle() -> Check {
    let t0 = Instant::now();
    let mut r = rng(3);
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    let mut skipped_infeasible = 0;
    for frames in 1..=6 {
        for classes in 1..=3 {
            for len in 0..=3 {
                for _ in 0..12 {
                    let target: Vec<usize> = (0..len).map(|_| r.random_range(0..classes)).collect();
                    let t = CtcTarget::new(target.clone());
                    if frames < t.min_frames() {
                        skipped_infeasible += 1;
                        assert!(cupe::objectives::ctc_loss(&Tensor::zeros(&[frames, classes + 1]), &t).is_err());
                        continue;
                    }
                    let lp = log_softmax_rows(&Tensor::randn(&[frames, classes + 1], 1.5, &mut r));
                    let (loss, _) = cupe::objectives::ctc_loss(&lp, &t).unwrap();
                    worst = worst.max((loss - ctc_by_enumeration(&lp, &target)).abs());
                    cases += 1;
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    check(
        cases >= 500 && worst <= 1e-8 && elapsed < Duration::from_secs(30),
        format!("{cases} cases (+{skipped_infeasible} infeasible rejected), max |diff| {worst:.2e}, {elapsed:.2?}"),
    )
}

// Gradient suite.

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> cupe::Result<Var>>;

struct GradCase {
    op: Op,
    inputs: Vec<Tensor>,
    step: f64,
}

/// Five-point central differences keep truncation error at `O(h^4)`.
const STEP: f64 = 1e-3;
/// Stitching scales edge frames by ~1e-6, so those gradient entries sit
/// near the rounding floor of the loss; a wider step lifts them above it.
const STITCH_STEP: f64 = 1e-2;

fn case(op: impl Fn(&mut Tape, &[Var]) -> cupe::Result<Var> + 'static, inputs: Vec<Tensor>) -> GradCase {
    GradCase {
        op: Box::new(op),
        inputs,
        step: STEP,
    }
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn attention_params(dim: usize, r: &mut ChaCha8Rng) -> AttentionParams {
    let s = 1.0 / (dim as f64).sqrt();
    AttentionParams {
        model_dim: dim,
        heads: 1,
        norm_gamma: Tensor::new(&[dim], (0..dim).map(|_| 1.0 + r.random_range(-0.5..0.5)).collect()).unwrap(),
        norm_beta: Tensor::randn(&[dim], 0.1, r),
        weights: std::array::from_fn(|_| Tensor::randn(&[dim, dim], s, r)),
        biases: std::array::from_fn(|_| Tensor::randn(&[dim], 0.1, r)),
        dropout_rate: 0.0,
    }
}

/// One randomly shaped instance of every differentiable layer.
fn layer_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, GradCase)> {
    let mut out = Vec::new();

    let groups = [1usize, 2][r.random_range(0..2)];
    let cin = groups * r.random_range(1..=2);
    let cout = groups * r.random_range(1..=2);
    let kernel = r.random_range(1..=5);
    let stride = r.random_range(1..=3);
    let padding = r.random_range(0..=kernel / 2);
    let len = r.random_range(kernel..kernel + 6);
    let geo = ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride,
        padding,
        groups,
    };
    let batch = r.random_range(1..=2);
    out.push((
        "conv1d",
        case(
            move |t, v| t.conv1d(v[0], v[1], Some(v[2]), geo),
            vec![randn(&[batch, cin, len], r), randn(&geo.weight_shape(), r), randn(&[cout], r)],
        ),
    ));

    let (b, c, l) = (r.random_range(2..=3), r.random_range(1..=3), r.random_range(1..=4));
    let (rm, rv) = (vec![0.0; c], vec![1.0; c]);
    out.push((
        "batch_norm",
        case(
            move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], (&rm, &rv), true, 1e-5)?.0),
            vec![randn(&[b, c, l], r), randn(&[c], r), randn(&[c], r)],
        ),
    ));

    let (rows, d) = (r.random_range(1..=4), r.random_range(2..=6));
    out.push((
        "layer_norm",
        case(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), vec![randn(&[rows, d], r), randn(&[d], r), randn(&[d], r)]),
    ));

    let (n, fi, fo) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5));
    out.push((
        "linear",
        case(|t, v| t.linear(v[0], v[1], Some(v[2])), vec![randn(&[n, fi], r), randn(&[fo, fi], r), randn(&[fo], r)]),
    ));

    let shape = [r.random_range(1..=3), r.random_range(1..=5)];
    out.push(("gelu", case(|t, v| Ok(t.gelu(v[0])), vec![randn(&shape, r)])));
    out.push(("sigmoid", case(|t, v| Ok(t.sigmoid(v[0])), vec![randn(&shape, r)])));
    out.push(("softmax", case(|t, v| Ok(t.softmax(v[0])), vec![randn(&shape, r)])));
    out.push(("log_softmax", case(|t, v| Ok(t.log_softmax(v[0])), vec![randn(&shape, r)])));
    let seed = r.random::<u64>();
    out.push(("dropout", case(move |t, v| t.dropout(v[0], 0.3, true, seed), vec![randn(&shape, r)])));

    let (b, c, l) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=5));
    out.push(("channel_gate", case(|t, v| t.mul_channel(v[0], v[1]), vec![randn(&[b, c, l], r), randn(&[b, c], r)])));
    out.push(("average_pool", case(|t, v| t.mean_last(v[0]), vec![randn(&[b, c, l], r)])));
    out.push(("transpose", case(|t, v| t.transpose12(v[0]), vec![randn(&[b, c, l], r)])));
    let g = r.random_range(1..=2);
    out.push((
        "grouped_concat",
        case(
            move |t, v| t.concat_grouped(v[0], v[1], g),
            vec![randn(&[b, g * r.random_range(1..=2), l], r), randn(&[b, g * r.random_range(1..=2), l], r)],
        ),
    ));

    let heads = r.random_range(1..=2);
    let dim = heads * r.random_range(1..=3);
    let (b, f) = (r.random_range(1..=2), r.random_range(1..=4));
    out.push((
        "attention",
        case(
            move |t, v| t.attention(v[0], v[1], v[2], heads, None),
            vec![randn(&[b, f, dim], r), randn(&[b, f, dim], r), randn(&[b, f, dim], r)],
        ),
    ));

    // The key bias shifts every score of a row equally, so its exact
    // gradient is zero; it is held constant here.
    let dim = heads * r.random_range(1..=3);
    let p = attention_params(dim, r);
    let key_bias = p.biases[1].clone();
    let mut inputs = vec![randn(&[1, f, dim], r), p.norm_gamma.clone(), p.norm_beta.clone()];
    inputs.extend([&p.weights[0], &p.biases[0], &p.weights[1], &p.weights[2], &p.biases[2], &p.weights[3], &p.biases[3]].map(|t| t.clone()));
    let drop_seed = r.random::<u64>();
    out.push((
        "attention_block",
        case(
            move |t, v| {
                let bk = t.constant(key_bias.clone());
                let vars = [v[1], v[2], v[3], v[4], v[5], bk, v[6], v[7], v[8], v[9]];
                functional::attention_block(t, v[0], &vars, heads, Some((0.25, drop_seed)))
            },
            inputs,
        ),
    ));

    let cfg = WindowConfig::default();
    let samples = r.random_range(1..6000);
    let batch = window::slice_clip(&vec![0.0; samples], &cfg).unwrap();
    let plan = StitchPlan::new(&batch.offsets, samples, &cfg).unwrap();
    let k = r.random_range(2..=4);
    let mode = if r.random_bool(0.5) { StitchMode::Probabilities } else { StitchMode::Logits };
    let mut stitch = case(
        move |t, v| t.stitch(v[0], 0, &plan, mode),
        vec![random_dists(&[batch.len(), cfg.frames_per_window(), k], r)],
    );
    stitch.step = STITCH_STEP;
    out.push(("stitch", stitch));

    let classes = r.random_range(1..=3);
    let frames = r.random_range(4..=8);
    let target = CtcTarget::new((0..r.random_range(0..=3)).map(|_| r.random_range(0..classes)).collect());
    out.push((
        "ctc",
        case(
            move |t, v| {
                let lp = t.log_softmax(v[0]);
                t.ctc_loss(lp, &target)
            },
            vec![randn(&[frames, classes + 1], r)],
        ),
    ));

    let mask = SilenceMask::from_flags((0..frames).map(|_| r.random_bool(0.5)).collect());
    out.push((
        "silence",
        case(move |t, v| t.silence_loss(v[0], &mask), vec![Tensor::uniform(&[frames], 1.0, r)]),
    ));

    let rows = r.random_range(1..=4);
    let width = r.random_range(1..=5);
    let target = Tensor::randn(&[rows, width], 1.0, r);
    // Piecewise quadratic: a narrow step avoids straddling the kink.
    let mut smooth = case(move |t, v| t.smooth_l1(v[0], &target), vec![randn(&[rows, width], r)]);
    smooth.step = 1e-6;
    out.push(("smooth_l1", smooth));

    out
}

/// The training objective: softmax, stitching, clamped log, CTC plus the
/// weighted silence term.
fn combined_case(r: &mut ChaCha8Rng) -> GradCase {
    let cfg = WindowConfig::default();
    let samples = r.random_range(1500..5000);
    let batch = window::slice_clip(&vec![0.0; samples], &cfg).unwrap();
    let plan = StitchPlan::new(&batch.offsets, samples, &cfg).unwrap();
    let classes = r.random_range(1..=3);
    let target = CtcTarget::new((0..r.random_range(1..=4)).map(|_| r.random_range(0..classes)).collect());
    let mask = SilenceMask::from_flags((0..plan.frames).map(|_| r.random_bool(0.4)).collect());
    let alpha = r.random_range(0.01..1.0);
    let mut c = case(
        move |t, v| {
            let probs = t.softmax(v[0]);
            let stitched = t.stitch(probs, 0, &plan, StitchMode::Probabilities)?;
            let lp = t.log_clamped(stitched, 1e-12);
            let ctc = t.ctc_loss(lp, &target)?;
            let blank = t.select_column(stitched, classes)?;
            let sil = t.silence_loss(blank, &mask)?;
            let sil = t.scale(sil, alpha);
            t.add(ctc, sil)
        },
        vec![randn(&[batch.len(), cfg.frames_per_window(), classes + 1], r)],
    );
    c.step = STITCH_STEP;
    c
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let mut r = rng(4);
    let mut worst: Vec<(&str, f64, usize)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => {
            w.1 = w.1.max(err);
            w.2 += 1;
        }
        None => worst.push((name, err, 1)),
    };
    for _ in 0..20 {
        for (name, c) in layer_cases(&mut r) {
            record(name, grad_check_five_point(&c.op, &c.inputs, c.step).unwrap());
        }
        let c = combined_case(&mut r);
        record("combined_loss", grad_check_five_point(&c.op, &c.inputs, c.step).unwrap());
    }
    let elapsed = t0.elapsed();
    let failing: Vec<String> = worst.iter().filter(|w| w.1 > 1e-4 || w.2 < 20).map(|w| format!("{}={:.1e}", w.0, w.1)).collect();
    let (worst_name, max) = worst.iter().fold(("", 0.0), |acc, w| if w.1 > acc.1 { (w.0, w.1) } else { acc });
    check(
        failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} layers x 20 shapes, max relative error {max:.2e} ({worst_name}), {elapsed:.2?}{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!("; over tolerance: {}", failing.join(", ")) }
        ),
    )
}

// Stitching properties.

fn stitching() -> Check {
    let t0 = Instant::now();
    let cfg = WindowConfig::default();
    let fw = cfg.frames_per_window();
    let mut r = rng(5);
    let mut ok = true;
    let mut worst_fixed: f64 = 0.0;
    for _ in 0..60 {
        let len = r.random_range(1..20_000);
        let batch = window::slice_clip(&vec![0.0; len], &cfg).unwrap();
        let plan = StitchPlan::new(&batch.offsets, len, &cfg).unwrap();
        let k = r.random_range(2..6);
        let pw = random_dists(&[batch.len(), fw, k], &mut r);
        let s = window::stitch(&pw, &batch, &cfg, StitchMode::Probabilities).unwrap();
        for g in 0..s.len() {
            let row = s.row(g);
            // Each frame's weights over contributing window frames form a
            // partition of unity, so the output lies inside their hull.
            let deps: Vec<_> = plan.deposits.iter().filter(|d| d.2 == g).collect();
            let mass: f64 = deps.iter().map(|d| d.3).sum();
            ok &= !deps.is_empty() && (mass - plan.weight_mass[g]).abs() < 1e-12;
            ok &= (row.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            for c in 0..k {
                let vals = deps.iter().map(|d| pw.data()[(d.0 * fw + d.1) * k + c]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                ok &= row[c] >= lo - 1e-12 && row[c] <= hi + 1e-12;
            }
        }
        let d = random_dists(&[1, 1, k], &mut r);
        let same = Tensor::new(&[batch.len(), fw, k], d.data().repeat(batch.len() * fw)).unwrap();
        let s = window::stitch(&same, &batch, &cfg, StitchMode::Probabilities).unwrap();
        for g in 0..s.len() {
            for (a, e) in s.row(g).iter().zip(d.data()) {
                worst_fixed = worst_fixed.max((a - e).abs());
            }
        }
    }
    let single = window::slice_clip(&[0.0; 1920], &cfg).unwrap();
    let pw = random_dists(&[1, fw, 4], &mut r);
    let s = window::stitch(&pw, &single, &cfg, StitchMode::Probabilities).unwrap();
    let identity = s.len() == fw && s.frames.data().iter().zip(pw.data()).all(|(a, b)| (a - b).abs() < 1e-12);
    let symmetric = (0..=fw).all(|t| (cosine_weight(t, fw) - cosine_weight(fw - t, fw)).abs() < 1e-12) && cosine_weight(fw / 2, fw) == 1.0;
    let elapsed = t0.elapsed();
    check(
        ok && worst_fixed <= 1e-9 && identity && symmetric && elapsed < Duration::from_secs(5),
        format!("convex combination {ok}, fixed point max err {worst_fixed:.1e}, single window identity {identity}, symmetric weights {symmetric}, {elapsed:.2?}"),
    )
}

// Silence-loss closed forms.

fn silence_closed_forms() -> Check {
    let all = SilenceMask::from_flags(vec![true; 10]);
    let none = SilenceMask::from_flags(vec![false; 10]);
    let half = SilenceMask::from_flags((0..10).map(|i| i % 2 == 0).collect());
    let a = silence_loss(&[1.0; 10], &all).unwrap();
    let b = silence_loss(&[1.0; 10], &none).unwrap();
    let c = silence_loss(&[0.5; 10], &half).unwrap();
    let pass = (a - 0.5).abs() <= 1e-12 && (b - 0.1).abs() <= 1e-12 && (c - 0.15).abs() <= 1e-12;
    check(pass, format!("all silent {a}, all speech {b}, half silent at 0.5 {c}"))
}

// Desk-scale corpus shared by the training criteria.

struct Desk {
    _dir: tempfile::TempDir,
    inv: PhonemeInventory,
    train: Corpus,
    held_out: Corpus,
    unlabelled: Corpus,
}

fn desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let full = PhonemeInventory::default_inventory();
    let train_dir = dir.path().join("train");
    let held_dir = dir.path().join("held");
    let m = make_dataset(&train_dir, &DatasetConfig::default(), &full).unwrap();
    let held_cfg = DatasetConfig {
        utterances: 20,
        seed: 99,
        ..DatasetConfig::default()
    };
    let hm = make_dataset(&held_dir, &held_cfg, &full).unwrap();
    let inv = PhonemeInventory::load(train_dir.join("inventory.tsv")).unwrap();
    let cfg = TrainConfig::desk(inv.num_classes());
    let load = |m: &Manifest, inv: Option<&PhonemeInventory>| Corpus::load(m, inv, cfg.unknown_symbols, &cfg.model.window, cfg.silence_threshold_db).unwrap();
    Desk {
        train: load(&m, Some(&inv)),
        held_out: load(&hm, Some(&inv)),
        unlabelled: load(&m, None),
        inv,
        _dir: dir,
    }
}

fn overfit_config(classes: usize) -> TrainConfig {
    TrainConfig {
        steps: 2000,
        validate_every: 100,
        early_stop_per: Some(0.10),
        ..TrainConfig::desk(classes)
    }
}

fn overfit(d: &Desk, runs: &mut Vec<String>) -> Check {
    let cfg = overfit_config(d.inv.num_classes());
    let t0 = Instant::now();
    let out: TrainOutcome = train_supervised(&cfg, &d.train, None, &d.inv).unwrap();
    let elapsed = t0.elapsed();
    runs.push(out.checkpoint(&d.inv).unwrap().hash().unwrap());
    let train_per = out.validations.last().unwrap().per;
    let eval = evaluate_corpus(&out.model, &d.train, &d.inv, None).unwrap();
    let gpm = eval.report.gp_macro.unwrap_or(0.0);
    let pass = d.train.len() == 50 && d.inv.num_classes() == 8 && train_per < 0.10 && out.steps_run <= 2000 && elapsed < Duration::from_secs(600) && gpm > 0.5;
    check(
        pass,
        format!("training PER {train_per:.3} after {} steps in {elapsed:.1?}, eval GPm {gpm:.3}", out.steps_run),
    )
}

// Pretraining progress and frozen-feature fine-tuning.

fn ssl_progress(d: &Desk) -> Check {
    let classes = d.inv.num_classes();
    let cfg = TrainConfig {
        steps: 500,
        ..TrainConfig::desk(classes)
    };
    let t0 = Instant::now();
    let pre = pretrain_ssl(&cfg, &d.unlabelled).unwrap();
    let pre_time = t0.elapsed();
    let rec: Vec<f64> = pre.history.iter().map(|h| h.losses.reconstruction).collect();
    let first = rec[..10].iter().sum::<f64>() / 10.0;
    let last = rec[rec.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - last / first;
    let perplexity = pre.corpus_perplexity(&d.unlabelled).unwrap();
    let ck = pre.checkpoint().unwrap();

    // Fine-tuning reuses the supervised rate; see the README for why the
    // reduced default rate is not used at this budget.
    let mut ft_cfg = TrainConfig {
        steps: 400,
        validate_every: 0,
        ..TrainConfig::desk(classes)
    };
    ft_cfg.finetune.lr_scale = 1.0;
    ft_cfg.finetune.freeze_features = true;
    let before = group_snapshot(&EncoderState::from_checkpoint(&ck).unwrap().store, ParamGroup::FeatureExtractor);
    let tuned = finetune(&ft_cfg, &ck, &d.train, Some(&d.held_out), &d.inv).unwrap();
    let after = group_snapshot(&tuned.model.store, ParamGroup::FeatureExtractor);
    let frozen = !before.is_empty()
        && before.len() == after.len()
        && before.iter().zip(&after).all(|(a, b)| a.0 == b.0 && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    let baseline = finetune_from_scratch(&ft_cfg, &d.train, Some(&d.held_out), &d.inv).unwrap();
    let tuned_per = evaluate_corpus(&tuned.model, &d.held_out, &d.inv, None).unwrap().report.per;
    let base_per = evaluate_corpus(&baseline.model, &d.held_out, &d.inv, None).unwrap().report.per;
    let pass = pre.steps_run == 500 && drop >= 0.5 && perplexity > 2.0 && frozen && tuned_per < base_per;
    check(
        pass,
        format!(
            "reconstruction {first:.4} -> {last:.4} ({:.0}% drop) in {pre_time:.1?}, codebook perplexity {perplexity:.1}, features bit-identical {frozen}, held-out PER fine-tuned {tuned_per:.3} vs baseline {base_per:.3}",
            100.0 * drop
        ),
    )
}

// Metric oracles.

fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn one_hot(labels: &[usize], width: usize) -> Tensor {
    let mut d = vec![0.0; labels.len() * width];
    for (t, &k) in labels.iter().enumerate() {
        d[t * width + k] = 1.0;
    }
    Tensor::new(&[labels.len(), width], d).unwrap()
}

fn metrics() -> Check {
    let mut r = rng(9);
    let classes = 6;
    let mut align_ok = true;
    let mut results: Vec<AlignmentResult> = Vec::new();
    for _ in 0..1000 {
        let a: Vec<usize> = (0..r.random_range(0..12)).map(|_| r.random_range(0..classes)).collect();
        let b: Vec<usize> = (0..r.random_range(0..12)).map(|_| r.random_range(0..classes)).collect();
        let ar = align(&a, &b);
        align_ok &= ar.errors() == edit_distance(&a, &b);
        align_ok &= ar.matches + ar.substitutions + ar.deletions == a.len();
        align_ok &= ar.matches + ar.substitutions + ar.insertions == b.len();
        results.push(ar);
    }

    // Hand-computed micro cases.
    let mut micro = per(&align(&[0, 1, 2], &[0, 1, 2])) == 0.0;
    micro &= per(&align(&[0, 1, 2], &[0, 2])) == 1.0 / 3.0;
    micro &= per(&align(&[0, 1], &[0, 1, 1, 1])) == 1.0;
    micro &= per(&align(&[0, 1, 2, 3], &[1, 1, 2, 0])) == 0.5;
    // truth a a b b, predicted a b b b: F1(a) = 2/3, F1(b) = 4/5.
    micro &= f1_macro(&[align(&[0, 0, 1, 1], &[0, 1, 1, 1])], 2) == (2.0 / 3.0 + 4.0 / 5.0) / 2.0;
    micro &= f1_macro(&[align(&[0, 1], &[0, 1])], 2) == 1.0;
    // GP: one phoneme held at 0.7 over two frames.
    let post = Tensor::new(&[3, 3], vec![0.1, 0.2, 0.7, 0.7, 0.2, 0.1, 0.7, 0.1, 0.2]).unwrap();
    let dec = collapse(&[2, 0, 0], 2);
    let (m, w) = gp(&post, &align(&[0], &dec.sequence), &dec.segments).unwrap();
    micro &= (m.unwrap() - 0.7).abs() < 1e-15 && (w.unwrap() - 0.7).abs() < 1e-15;
    let labels = [3, 0, 0, 3, 1, 2, 2, 3];
    let dec = collapse(&labels, 3);
    micro &= gp(&one_hot(&labels, 4), &align(&[0, 1, 2], &dec.sequence), &dec.segments).unwrap() == (Some(1.0), Some(1.0));

    // Confusion accounting on the generated pairs.
    let conf = confusion(&results, classes);
    let (m, s, i, d) = results.iter().fold((0, 0, 0, 0), |acc, ar| {
        (acc.0 + ar.matches, acc.1 + ar.substitutions, acc.2 + ar.insertions, acc.3 + ar.deletions)
    });
    let mut accounting = conf.total() as usize == m + s + i + d;
    let un = conf.unaligned();
    for k in 0..classes {
        let truth_k = results.iter().flat_map(|ar| &ar.truth).filter(|&&c| c == k).count() as u64;
        let pred_k = results.iter().flat_map(|ar| &ar.pred).filter(|&&c| c == k).count() as u64;
        accounting &= conf.counts[k].iter().sum::<u64>() == truth_k;
        accounting &= (0..=classes).map(|t| conf.counts[t][k]).sum::<u64>() == pred_k;
    }
    accounting &= (0..classes).map(|k| conf.counts[k][k]).sum::<u64>() as usize == m;
    accounting &= conf.counts[un].iter().sum::<u64>() as usize == i;
    accounting &= (0..classes).map(|k| conf.counts[k][un]).sum::<u64>() as usize == d;
    let ops_total: usize = results.iter().map(|ar| ar.ops.iter().filter(|o| !matches!(o, AlignOp::Match(..))).count()).sum();
    accounting &= ops_total == s + i + d;
    accounting &= class_stats(&conf).iter().all(|c| c.support == c.true_positives + c.false_negatives);
    check(
        align_ok && micro && accounting,
        format!("1000 alignments agree {align_ok}, micro cases exact {micro}, confusion accounting {accounting}"),
    )
}

// Window independence.

fn window_independence() -> Check {
    let model = EncoderState::build(ModelConfig::desk(4), 7).unwrap();
    let cfg = model.config.window;
    let mut r = rng(10);
    let audio = Tensor::uniform(&[9000], 0.4, &mut r).into_data();
    let batch = window::slice_clip(&audio, &cfg).unwrap();
    let n = batch.len();
    let w = cfg.window_samples;

    let emb = model.encode_window(&batch.windows, false, 0).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, n / 2);
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| batch.window(i).to_vec()).collect();
    let pemb = model.encode_window(&Tensor::new(&[n, 1, w], permuted).unwrap(), false, 0).unwrap();
    let per = emb.len() / n;
    let permutes = perm.iter().enumerate().all(|(j, &i)| pemb.data()[j * per..(j + 1) * per] == emb.data()[i * per..(i + 1) * per]);

    let plan = StitchPlan::new(&batch.offsets, batch.source_length, &cfg).unwrap();
    let full = window::stitch_with_plan(&model.window_posteriors(&batch.windows).unwrap(), 0, &plan, &cfg, StitchMode::Probabilities).unwrap();
    let mut local = true;
    for g in (0..plan.frames).step_by(3) {
        let keep = plan.contributors(g);
        let mut zeroed = batch.windows.clone();
        for k in (0..n).filter(|k| !keep.contains(k)) {
            zeroed.data_mut()[k * w..(k + 1) * w].iter_mut().for_each(|v| *v = 0.0);
        }
        let post = model.window_posteriors(&zeroed).unwrap();
        let s = window::stitch_with_plan(&post, 0, &plan, &cfg, StitchMode::Probabilities).unwrap();
        local &= s.row(g) == full.row(g);
    }
    check(permutes && local, format!("{n} windows: permutation equivariant {permutes}, frames depend only on overlapping windows {local}"))
}

// Determinism.

fn determinism(d: &Desk, runs: &mut Vec<String>) -> Check {
    let cfg = overfit_config(d.inv.num_classes());
    let out = train_supervised(&cfg, &d.train, None, &d.inv).unwrap();
    runs.push(out.checkpoint(&d.inv).unwrap().hash().unwrap());
    // A single batch also reproduces bit for bit.
    let model = EncoderState::build(cfg.model.clone(), 5).unwrap();
    let batch: Vec<_> = d.train.utterances.iter().take(2).collect();
    let a = batch_gradients(&model, &batch, cfg.alpha_s, 1).unwrap();
    let b = batch_gradients(&model, &batch, cfg.alpha_s, 1).unwrap();
    let same_batch = a.loss.to_bits() == b.loss.to_bits() && a.grads == b.grads;
    let equal = runs.len() == 2 && runs[0] == runs[1];
    check(
        equal && same_batch,
        format!("checkpoint hashes {}", runs.iter().map(|h| &h[..16]).collect::<Vec<_>>().join(" / ")),
    )
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let c = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        check(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {id:>2} {name:<22} {} ({:.1?}): {}",
        if c.pass { "PASS" } else { "FAIL" },
        t0.elapsed(),
        c.detail
    );
    c.pass
}

#[test]
fn acceptance_criteria() {
    let mut passed = Vec::new();
    passed.push(run(1, "shape oracle", shapes));
    passed.push(run(2, "parameter count", param_count));
    passed.push(run(3, "ctc oracle", ctc_oracle));
    passed.push(run(4, "gradient suite", gradients));
    passed.push(run(5, "stitching properties", stitching));
    passed.push(run(6, "silence closed forms", silence_closed_forms));
    let d = desk();
    let mut hashes = Vec::new();
    passed.push(run(7, "desk overfit", || overfit(&d, &mut hashes)));
    passed.push(run(8, "pretraining progress", || ssl_progress(&d)));
    passed.push(run(9, "metric oracles", metrics));
    passed.push(run(10, "window independence", window_independence));
    passed.push(run(11, "determinism", || determinism(&d, &mut hashes)));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn desk_corpus_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let inv = PhonemeInventory::default_inventory();
    let cfg = DatasetConfig {
        utterances: 3,
        ..DatasetConfig::default()
    };
    make_dataset(a.path(), &cfg, &inv).unwrap();
    make_dataset(b.path(), &cfg, &inv).unwrap();
    for f in ["manifest.tsv", "inventory.tsv", "audio/utt_00002.wav"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    std::fs::read(dir.join(f)).unwrap()
}
