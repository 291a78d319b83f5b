//! Acceptance suite: criteria 1 to 8, run in order in one process so that the
//! synthetic benchmark is built and trained once and shared by criteria 5-7.
//! Each criterion prints one PASS/FAIL line; wall-clock limits count.
//!
//! Built without the libtest harness so the lines are never captured; exits
//! non-zero when any criterion fails. Run with
//! `cargo test -p advblur --test acceptance`.

use std::path::Path;
use std::time::{Duration, Instant};

use advblur::blur::{apply_blur, forge_adversarial_set, median_filter_oracle, BlurMethod, BlurSpec, Border};
use advblur::data::{
    build_splits, load_image, DatasetId, DatasetManifest, ImageRecord, ImageTensor, Selector, SplitMode, SplitSpec, Splits,
};
use advblur::eval::{aggregate_seeds, evaluate, render_report, uniformity_diagnostic, EvalReport, EvalRow, Layout, Provenance};
use advblur::explain::{gradcam, masking_experiment, silhouette_score, tsne_embed, TsneConfig, DEFAULT_MASK_THRESHOLD};
use advblur::loss::{blurred_image_loss, gradient_check, original_image_loss, LossConfig, LossKind};
use advblur::train::{
    build_model, make_synthetic_dataset, render_fundus, train, DomainStyle, ModelBundle, SynthSpec, TrainConfig,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
    elapsed: Duration,
    limit: Duration,
}

fn record(outcomes: &mut Vec<Outcome>, id: usize, limit_s: u64, start: Instant, pass: bool, detail: String) {
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(limit_s);
    let o = Outcome { id, pass: pass && elapsed <= limit, detail, elapsed, limit };
    println!(
        "criterion {}: {} ({:.1} s of {} s) {}",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.elapsed.as_secs_f64(),
        o.limit.as_secs(),
        o.detail
    );
    outcomes.push(o);
}

fn criterion_1() -> (bool, String) {
    let cfg = LossConfig::default();
    let equal = blurred_image_loss(&[0.7; 5], &cfg).unwrap();
    // Softmax (1/3, 1/6, 1/6, 1/6, 1/6): logits ln 2 and four zeros.
    let skew = blurred_image_loss(&[2f64.ln(), 0.0, 0.0, 0.0, 0.0], &cfg).unwrap();
    let half = original_image_loss(&[0.0, 0.0], 0).unwrap();
    let pass = equal.abs() <= 1e-12 && (skew - 1.0 / 225.0).abs() <= 1e-9 && (half - std::f64::consts::LN_2).abs() <= 1e-6;
    (pass, format!("BI(equal)={equal:.1e}, BI(1/3,1/6..)={skew:.12}, OI(p=0.5)={half:.7}"))
}

fn criterion_2() -> (bool, String) {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_oi, mut worst_bi, mut worst_all) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let logits = Array2::from_shape_fn((1, 5), |_| rng.random_range(-4.0..4.0));
        let grade = vec![rng.random_range(0..5usize)];
        worst_oi = worst_oi.max(gradient_check(LossKind::Original, logits.view(), &grade, &cfg, 1e-5).unwrap());
        worst_bi = worst_bi.max(gradient_check(LossKind::Blurred, logits.view(), &[5], &cfg, 1e-5).unwrap());
        let label = if rng.random_bool(0.5) { 5 } else { grade[0] };
        worst_all = worst_all.max(gradient_check(LossKind::Combined, logits.view(), &[label], &cfg, 1e-5).unwrap());
    }
    let worst = worst_oi.max(worst_bi).max(worst_all);
    (worst < 1e-4, format!("max relative error OI {worst_oi:.2e}, BI {worst_bi:.2e}, combined {worst_all:.2e}"))
}

fn criterion_3() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut cases = 0;
    for _ in 0..50 {
        let img = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| f32::from(rng.random::<u8>()) / 255.0));
        for kernel in [3, 5, 7] {
            for border in [Border::Reflect, Border::Replicate] {
                let mut spec = BlurSpec::with_method(BlurMethod::Median, kernel);
                spec.border = border;
                let fast = apply_blur(&img, &spec).unwrap();
                let oracle = median_filter_oracle(&img, kernel, border).unwrap();
                let same = fast.0.iter().zip(oracle.0.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
                mismatches += usize::from(!same);
                cases += 1;
            }
        }
    }
    (mismatches == 0, format!("{cases} cases, {mismatches} differ bit-wise from the sort oracle"))
}

fn criterion_4(dir: &Path) -> (bool, String) {
    let mut spec = SynthSpec::new(200, vec![DomainStyle::reference()], 4);
    spec.native_size = 64;
    let originals = make_synthetic_dataset(&spec, &dir.join("synth")).unwrap();
    let blur = BlurSpec { ratio: 1.0, ..BlurSpec::default() };
    let forged = forge_adversarial_set(&originals, &blur, &dir.join("forged"), 0).unwrap();
    let twins: Vec<&ImageRecord> = forged.records.iter().filter(|r| r.label == 5).collect();
    let resolving = twins
        .iter()
        .filter(|t| {
            let src = t.source_record.as_ref().unwrap();
            src.is_file() && originals.records.iter().any(|o| &o.image_path == src)
        })
        .count();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Quantised as when written to PNG; forged inputs are always 8-bit files.
    let fundus = ImageTensor::from_rgb8(&render_fundus(512, &DomainStyle::reference(), 4, 3, &mut rng).image.to_rgb8());
    let (lo, hi) = fundus.min_max();
    let (blo, bhi) = apply_blur(&fundus, &BlurSpec::default()).unwrap().min_max();
    let within = blo >= lo && bhi <= hi;
    let pass = forged.len() == 400 && twins.len() == 200 && resolving == 200 && within;
    (
        pass,
        format!(
            "{} records, {} labelled 5, {} sources resolve; kernel-151 output [{blo:.4}, {bhi:.4}] within input [{lo:.4}, {hi:.4}]",
            forged.len(),
            twins.len(),
            resolving
        ),
    )
}

/// Criterion-5 benchmark shared with criteria 6 and 7.
struct Bench {
    splits: Splits,
    baseline_splits: Splits,
    shifted: Vec<ImageRecord>,
    blurred_train: Vec<ImageRecord>,
    config: TrainConfig,
    model: ModelBundle,
}

fn bench_config() -> TrainConfig {
    TrainConfig { epochs: 5, batch_size: 32, learning_rate: 0.001, seeds: vec![0, 1, 2], ..TrainConfig::desk_scale() }
}

fn bench_split() -> SplitSpec {
    let mut s = SplitSpec::new(SplitMode::Explicit { train: Selector::datasets([DatasetId::Synthetic]), tests: vec![] });
    s.in_domain_test_fraction = 0.2;
    s
}

fn criterion_5(dir: &Path) -> (bool, String, Option<Bench>) {
    let mut spec = SynthSpec::new(2000, vec![DomainStyle::reference()], 7);
    spec.native_size = 128;
    let originals = make_synthetic_dataset(&spec, &dir.join("synth")).unwrap();
    let forged = forge_adversarial_set(&originals, &BlurSpec::default(), &dir.join("forged"), 0).unwrap();
    let splits = build_splits(&forged, &bench_split()).unwrap();
    let config = bench_config();

    let (mut model, history) = train(&config, &splits, 0, None).unwrap();
    let (_, rerun) = train(&config, &splits, 0, None).unwrap();
    let drift = history.train_losses().iter().zip(rerun.train_losses()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let in_domain = splits.test("in_domain").unwrap();
    let acc = evaluate(&mut model, "in_domain", in_domain).unwrap().accuracy;
    let blurred_train: Vec<ImageRecord> = splits.train.iter().filter(|r| r.is_blurred()).cloned().collect();
    let held_out: Vec<ImageRecord> = held_out_twins(&forged, in_domain);
    let u = uniformity_diagnostic(&mut model, &held_out).unwrap();
    let pass = acc >= 85.0 && u.mean_max_softmax <= 0.35 && drift <= 1e-6 && history.epochs.len() == 5;
    let detail = format!(
        "in-domain accuracy {acc:.2}% (n={}), held-out blurred mean_max_softmax {:.4} (n={}), rerun loss drift {drift:.1e}",
        in_domain.len(),
        u.mean_max_softmax,
        held_out.len()
    );

    let baseline_originals = DatasetManifest::new(originals.records.clone(), originals.label_maps.clone()).unwrap();
    let baseline_splits = build_splits(&baseline_originals, &bench_split()).unwrap();
    let mut shifted_spec = SynthSpec::new(500, vec![DomainStyle::shifted()], 8);
    shifted_spec.native_size = 128;
    let shifted = make_synthetic_dataset(&shifted_spec, &dir.join("shifted")).unwrap().records;
    (pass, detail, Some(Bench { splits, baseline_splits, shifted, blurred_train, config, model }))
}

fn held_out_twins(forged: &DatasetManifest, test: &[ImageRecord]) -> Vec<ImageRecord> {
    forged
        .records
        .iter()
        .filter(|r| r.source_record.as_ref().is_some_and(|s| test.iter().any(|t| &t.image_path == s)))
        .cloned()
        .collect()
}

fn criterion_6(bench: &mut Bench) -> (bool, String) {
    let same_partition = bench.baseline_splits.test("in_domain") == bench.splits.test("in_domain");
    let mut adv = Vec::new();
    let mut base = Vec::new();
    for &seed in &bench.config.seeds {
        let a = if seed == 0 {
            evaluate(&mut bench.model, "shifted", &bench.shifted).unwrap().accuracy
        } else {
            let (mut m, _) = train(&bench.config, &bench.splits, seed, None).unwrap();
            evaluate(&mut m, "shifted", &bench.shifted).unwrap().accuracy
        };
        let baseline_cfg = TrainConfig { blur: None, ..bench.config.clone() };
        let (mut b, _) = train(&baseline_cfg, &bench.baseline_splits, seed, None).unwrap();
        adv.push(a);
        base.push(evaluate(&mut b, "shifted", &bench.shifted).unwrap().accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&adv), mean(&base));
    (
        ma >= mb && same_partition,
        format!(
            "shifted-domain accuracy over seeds {:?}: AdvBlur mean {ma:.2} {adv:.1?}, plain-CE mean {mb:.2} {base:.1?}",
            bench.config.seeds
        ),
    )
}

fn criterion_7(bench: &mut Bench) -> (bool, String) {
    let test = bench.splits.test("in_domain").unwrap();
    let r = masking_experiment(&mut bench.model, test, DEFAULT_MASK_THRESHOLD, 0).unwrap();
    let masked_drop = r.normal_accuracy - r.masked_accuracy;
    let random_drop = r.normal_accuracy - r.random_mask_accuracy;
    (
        r.masked_accuracy <= r.normal_accuracy && masked_drop >= random_drop,
        format!(
            "threshold {DEFAULT_MASK_THRESHOLD}: normal {:.2}, masked {:.2} (drop {masked_drop:.2}), random-mask {:.2} (drop {random_drop:.2}), {:.1}% of pixels zeroed",
            r.normal_accuracy,
            r.masked_accuracy,
            r.random_mask_accuracy,
            100.0 * r.masked_fraction
        ),
    )
}

fn criterion_8(dir: &Path) -> (bool, String) {
    let report = |acc: f64, seed: u64| {
        EvalReport::new(
            vec![EvalRow { method: "DA AdvBlur (Ours)".into(), domain: "D".into(), accuracy: acc, std: None, n: 100 }],
            Provenance { config_hashes: vec!["h".into()], seeds: vec![seed] },
        )
        .unwrap()
    };
    let agg = aggregate_seeds(&[report(81.5, 0), report(82.1, 1), report(81.8, 2)]).unwrap();
    let (mean, std) = (agg.rows[0].accuracy, agg.rows[0].std.unwrap());
    let table_input = EvalReport::new(
        ["D", "E"]
            .iter()
            .zip([81.8, 83.3])
            .map(|(d, a)| EvalRow { method: "DA AdvBlur (Ours)".into(), domain: d.to_string(), accuracy: a, std: None, n: 100 })
            .collect(),
        Provenance::default(),
    )
    .unwrap();
    let table = render_report(&[table_input], Layout::CameraTable, &dir.join("camera")).unwrap();
    let row = table.text.lines().find(|l| l.starts_with("DA AdvBlur")).unwrap_or_default().to_string();
    let cells: Vec<&str> = row.split_whitespace().rev().take(3).collect();
    let pass = (mean - 81.8).abs() < 1e-9 && (std - 0.245).abs() <= 1e-3 && cells == ["82.6", "83.3", "81.8"];
    (pass, format!("mean {mean:.4}, population std {std:.4}; camera row `{}`", row.trim()))
}

/// Further checks of derived behaviour on the trained benchmark. Printed only.
fn derived_checks(bench: &mut Bench) {
    let test = bench.splits.test("in_domain").unwrap().to_vec();
    let plot = tsne_embed(&mut bench.model, &test, &TsneConfig::default()).unwrap();
    let clusters: Vec<usize> = plot.labels.iter().map(|&l| usize::from(l > 0)).collect();
    let s = silhouette_score(&plot.points, &clusters).unwrap();
    println!("derived: t-SNE silhouette of grade 0 vs grades 1-4 = {s:.3} ({})", verdict(s > 0.0));

    let size = bench.model.image_size();
    let (mut inside, mut outside, mut k) = (0f32, 0f32, 0);
    for r in test.iter().filter(|r| r.label == 4).take(20) {
        let img = load_image(&r.image_path, size).unwrap();
        let heat = gradcam(&mut bench.model, &img, 4, None).unwrap();
        let c = size as f32 / 2.0;
        let radius = 0.44 * size as f32;
        let (mut si, mut ni, mut so, mut no) = (0f32, 0, 0f32, 0);
        for ((y, x), &v) in heat.values.indexed_iter() {
            let d = ((x as f32 + 0.5 - c).powi(2) + (y as f32 + 0.5 - c).powi(2)).sqrt();
            if d < 0.9 * radius {
                si += v;
                ni += 1;
            } else if d > 1.1 * radius {
                so += v;
                no += 1;
            }
        }
        inside += si / ni as f32;
        outside += so / no as f32;
        k += 1;
    }
    let (inside, outside) = (inside / k as f32, outside / k as f32);
    println!(
        "derived: grade-4 Grad-CAM mean heat inside the fundus disk {inside:.3} vs outside {outside:.3} ({})",
        verdict(inside > outside)
    );

    let sample: Vec<ImageRecord> = bench.blurred_train.iter().take(400).cloned().collect();
    let mut fresh = build_model(&bench.config, 0).unwrap();
    let before = uniformity_diagnostic(&mut fresh, &sample).unwrap();
    let after = uniformity_diagnostic(&mut bench.model, &sample).unwrap();
    println!(
        "derived: blurred-set mean BI loss trained {:.6} vs untrained {:.6}, mean max softmax {:.4} vs {:.4} ({})",
        after.mean_bi_loss,
        before.mean_bi_loss,
        after.mean_max_softmax,
        before.mean_max_softmax,
        verdict(after.mean_bi_loss < before.mean_bi_loss)
    );
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "holds"
    } else {
        "does not hold"
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut outcomes = Vec::new();

    let t = Instant::now();
    let (pass, detail) = criterion_1();
    record(&mut outcomes, 1, 1, t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_2();
    record(&mut outcomes, 2, 10, t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_3();
    record(&mut outcomes, 3, 30, t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_4(&dir.path().join("c4"));
    record(&mut outcomes, 4, 120, t, pass, detail);

    let t = Instant::now();
    let (pass, detail, bench) = criterion_5(&dir.path().join("c5"));
    record(&mut outcomes, 5, 600, t, pass, detail);
    let mut bench = bench.expect("benchmark built");

    let t = Instant::now();
    let (pass, detail) = criterion_6(&mut bench);
    record(&mut outcomes, 6, 1800, t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_7(&mut bench);
    record(&mut outcomes, 7, 300, t, pass, detail);

    let t = Instant::now();
    let (pass, detail) = criterion_8(&dir.path().join("c8"));
    record(&mut outcomes, 8, 1, t, pass, detail);

    println!("criterion 9: documented in README (full-scale run, not part of this suite)");
    derived_checks(&mut bench);

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        eprintln!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
