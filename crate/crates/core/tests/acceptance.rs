//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one `criterion N PASS|FAIL: ...` line. Training runs first because its
//! baseline checkpoint is the feature extractor of the corpus analysis.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//! The CIFAR-10 root is `$MASKANYNET_DATA`, else `<workspace>/data/cifar-10`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use maskanynet::error::Error;
use maskanynet::harness::{
    analyze_corpus, load_splits, train_on, AnalysisConfig, AnalysisReport, BackboneExtractor,
    CifarSource, ExperimentConfig, Split, TrainOptions,
};
use maskanynet::image::Image;
use maskanynet::masking::{apply_mask, generate_grid_mask, generate_patch_mask, MaskPolicy, Strategy};
use maskanynet::metrics::{f_score, shannon_entropy, similarity_score, AnalysisRecord, FScoreConfig};
use maskanynet::model::{
    align_features, build_backbone, split_backbone, AlignBlock, BackboneId, Family, FusionLevel,
    InputSpec, MaskAnyNet, ModelConfig, Mode, Toggles,
};
use maskanynet::nn::ParamStore;
use maskanynet::reuse::{compose_reuse, extract_regions, scatter_back};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn report(results: &mut BTreeMap<u32, Verdict>, id: u32, v: Verdict) {
    println!("criterion {id} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    results.insert(id, v);
}

fn data_root() -> PathBuf {
    std::env::var_os("MASKANYNET_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-10"))
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_fn(c, h, w, |_, _, _| rng.random_range(0..=255u8) as f32 / 255.0)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn runner() -> TestRunner {
    TestRunner::new_with_rng(
        PropConfig {
            cases: 1000,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

const GRID_RATIOS: [f64; 4] = [1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0];

/// A masking problem: strategy, ratio, block size, image and mask seed.
#[derive(Debug, Clone)]
struct Case {
    strategy: Strategy,
    ratio: f64,
    block: usize,
    image: Image,
    seed: u64,
}

fn cases(strategies: &'static [Strategy]) -> impl proptest::strategy::Strategy<Value = Case> {
    (
        0..strategies.len(),
        prop_oneof![Just(1usize), Just(3usize)],
        prop_oneof![Just(2usize), Just(4), Just(8)],
        0..GRID_RATIOS.len(),
        0.02f64..0.98,
        1usize..=3,
        1usize..=3,
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(move |(s, channels, block, gi, free_ratio, mr, mc, seed, pixel_seed)| {
            let strategy = strategies[s];
            let uses_grid = !matches!(strategy, Strategy::Patch | Strategy::Random);
            // Random masks need a ratio strictly below 1.
            let ratio = match strategy {
                Strategy::CombinedAll => GRID_RATIOS[gi.max(1)],
                _ if uses_grid => GRID_RATIOS[gi],
                _ => free_ratio,
            };
            // 12 cells tile every grid period k <= 4.
            let unit = block * 12;
            let (h, w) = (mr * unit, mc * unit);
            let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed);
            Case {
                strategy,
                ratio,
                block,
                image: random_image(&mut rng, channels, h, w),
                seed,
            }
        })
}

fn mask_of(case: &Case) -> Result<maskanynet::masking::MaskSpec, Error> {
    let policy = MaskPolicy {
        block_size: Some(case.block),
        ..MaskPolicy::new(case.strategy, case.ratio)
    };
    policy.generate(case.image.dims(), case.seed)
}

fn criterion_1() -> Verdict {
    let started = Instant::now();
    let per_strategy = std::cell::RefCell::new(BTreeMap::new());
    let result = runner().run(&cases(&Strategy::ALL), |case| {
        let spec = mask_of(&case).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let run = || -> Result<Image, Error> {
            let reuse = compose_reuse(&extract_regions(&case.image, &spec)?, spec.reuse_block())?;
            scatter_back(&reuse, &spec, &apply_mask(&case.image, &spec, 0.0)?.pixels)
        };
        let restored = run().map_err(|e| TestCaseError::fail(e.to_string()))?;
        *per_strategy.borrow_mut().entry(case.strategy.name()).or_insert(0usize) += 1;
        prop_assert!(restored == case.image, "round trip differs for {:?}", case.strategy);
        Ok(())
    });
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(()) => verdict(
            secs < 60.0,
            format!("1000 tuples bit-exact in {secs:.2}s (limit 60s); per strategy {:?}", per_strategy.borrow()),
        ),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn criterion_2() -> Verdict {
    const BLOCK: [Strategy; 3] = [Strategy::Patch, Strategy::Grid, Strategy::Combined];
    let result = runner().run(&cases(&BLOCK), |case| {
        let spec = mask_of(&case).map_err(|e| TestCaseError::fail(e.to_string()))?;
        // NaN fill marks occluded pixels without consulting the mask grid.
        let masked = apply_mask(&case.image, &spec, f32::NAN).unwrap().pixels;
        let (h, w) = case.image.dims();
        let mut source = vec![false; h * w];
        let b = spec.reuse_block();
        for patch in extract_regions(&case.image, &spec).unwrap() {
            let (r, c) = patch.position;
            for y in r * b..(r + 1) * b {
                for x in c * b..(c + 1) * b {
                    prop_assert!(!source[y * w + x], "pixel ({y},{x}) sourced twice");
                    source[y * w + x] = true;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                let visible = (0..masked.channels()).all(|ch| !masked.get(ch, y, x).is_nan());
                prop_assert!(
                    visible != source[y * w + x],
                    "pixel ({y},{x}) visible={visible} sourced={}",
                    source[y * w + x]
                );
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => verdict(
            true,
            "1000 patch/grid/combined cases: visible and reuse-source pixels are disjoint and cover the image",
        ),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn criterion_3() -> Verdict {
    let tol = 1e-9;
    let mut checks = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        checks.push((name.to_string(), got, want, (got - want).abs() <= tol));
    };
    check("similarity_score(0.5)", similarity_score(0.5, 0.5), 1.0, tol);
    check("similarity_score(1.0)", similarity_score(1.0, 0.5), (-0.5f64).exp(), tol);
    check("similarity_score(1.0) ~ 0.606531", similarity_score(1.0, 0.5), 0.606531, 1e-6);
    let constant = Image::filled(1, 16, 16, 0.3);
    check("entropy(constant)", shannon_entropy(&constant).unwrap(), 0.0, tol);
    let checker = Image::from_fn(1, 16, 16, |_, y, x| ((x + y) % 2) as f32);
    check("entropy(checkerboard 0/255)", shannon_entropy(&checker).unwrap(), 1.0, tol);
    let uniform = Image::from_fn(1, 16, 16, |_, y, x| (y * 16 + x) as f32 / 255.0);
    check("entropy(256-uniform)", shannon_entropy(&uniform).unwrap(), 8.0, tol);
    let pair = AnalysisRecord::new(Strategy::Grid, 0.0, 1.0, 0.5, 0.5);
    let cfg = FScoreConfig {
        w1: 0.5,
        w2: 0.5,
        s_a: 0.5,
        pairs: 1,
    };
    let f = f_score(&[pair], &cfg).unwrap();
    check("f_score(S=1, dH=1, w=0.5)", f, 1.0, 0.0);
    let failed: Vec<_> = checks.iter().filter(|c| !c.3).collect();
    let detail = checks
        .iter()
        .map(|(n, g, _, _)| format!("{n}={g:.9}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(failed.is_empty(), if failed.is_empty() { detail } else { format!("mismatch {failed:?}") })
}

fn criterion_4() -> Verdict {
    let ratios = [1.0 / 16.0, 1.0 / 9.0, 0.25, 0.5, 1.0];
    let mut problems = Vec::new();
    let mut checked = 0;
    // 12x12 cells tile every period k <= 4.
    for (h, w, b) in [(48, 48, 4), (96, 192, 8), (36, 36, 3)] {
        let cells = (h / b) * (w / b);
        for &ratio in &ratios {
            let want = (ratio * cells as f64).round() as usize;
            for seed in 0..20 {
                let spec = generate_patch_mask((h, w), b, ratio, seed).unwrap();
                checked += 1;
                if spec.masked_count() != want {
                    problems.push(format!("patch {h}x{w} r={ratio}: {} != {want}", spec.masked_count()));
                }
            }
            match generate_grid_mask((h, w), b, ratio) {
                Ok(spec) => {
                    checked += 1;
                    if spec.masked_count() != want {
                        problems.push(format!("grid {h}x{w} r={ratio}: {} != {want}", spec.masked_count()));
                    }
                    let k = (1.0 / ratio.sqrt()).round() as usize;
                    let kb = k * b;
                    for y in 0..h - kb {
                        for x in 0..w - kb {
                            let p = spec.is_masked_pixel(y, x);
                            if p != spec.is_masked_pixel(y + kb, x) || p != spec.is_masked_pixel(y, x + kb) {
                                problems.push(format!("grid r={ratio} not periodic at ({y},{x})"));
                            }
                        }
                    }
                }
                // Grid ratios are 1/k² by contract; 1/2 must be rejected.
                Err(Error::UnsupportedRatio { lower, upper, .. }) if ratio == 0.5 => {
                    if (lower, upper) != (0.25, 1.0) {
                        problems.push(format!("grid 0.5 names {lower}/{upper}, expected 0.25/1"));
                    }
                }
                Err(e) => problems.push(format!("grid {h}x{w} r={ratio}: {e}")),
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{checked} masks exact (patch at all 5 ratios, grid at 1/16, 1/9, 1/4, 1); grid periodic under k*b shifts; grid 1/2 rejected as unsupported (nearest 1/4, 1)"
            )
        } else {
            problems.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    )
}

fn criterion_5() -> Verdict {
    let input = InputSpec {
        channels: 3,
        height: 32,
        width: 32,
        num_classes: 10,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = Vec::new();
    let mut problems = Vec::new();
    for id in BackboneId::ALL {
        let store = ParamStore::new(id as u64, DType::F32, &Device::Cpu);
        let bb = build_backbone(id, input, &store.root()).unwrap();
        let batches: Vec<Tensor> = (0..4)
            .map(|_| random_tensor(&mut rng, &[25, 3, 32, 32], DType::F32))
            .collect();
        let whole: Vec<Vec<Vec<f32>>> = batches
            .iter()
            .map(|x| bb.forward(x).unwrap().to_vec2().unwrap())
            .collect();
        for point in bb.split_points() {
            let split = split_backbone(&bb, point).unwrap();
            let parts: Vec<Vec<Vec<f32>>> = batches
                .iter()
                .map(|x| split.high.forward(&split.low.forward(x).unwrap()).unwrap().to_vec2().unwrap())
                .collect();
            if parts != whole {
                problems.push(format!("{id}@{point}"));
            }
            checked.push(format!("{id}@{point}"));
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} splits bit-identical on 100 inputs each: {}", checked.len(), checked.join(" "))
        } else {
            format!("logits differ at {}", problems.join(", "))
        },
    )
}

fn criterion_6() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for id in BackboneId::ALL {
        let build = |toggles, level| {
            let mut c = ModelConfig::cifar(id);
            c.toggles = toggles;
            c.fusion.level = level;
            MaskAnyNet::new(c).unwrap().param_count() as f64
        };
        let base = build(Toggles::BASELINE, FusionLevel::Feature);
        let feature = build(Toggles::FULL, FusionLevel::Feature) / base;
        let decision = build(Toggles::FULL, FusionLevel::Decision) / base;
        let decision_ok = (1.9..=2.1).contains(&decision);
        let feature_ok = feature <= 1.10;
        // The band is stated for the residual family; other families are reported.
        let gated = id.family() == Family::Residual;
        if gated {
            pass &= feature_ok && decision_ok;
        }
        lines.push(format!(
            "{id}{} base {:.3}M feature x{feature:.3} decision x{decision:.3}",
            if gated { "" } else { " (info)" },
            base / 1e6
        ));
    }
    verdict(pass, lines.join("; "))
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    let mut groups_seen = 0;
    for id in BackboneId::ALL {
        let model = MaskAnyNet::new(ModelConfig::cifar(id)).unwrap();
        let images: Vec<Image> = (0..4).map(|_| random_image(&mut rng, 3, 32, 32)).collect();
        let labels = Tensor::new(&[0u32, 3, 5, 9], &Device::Cpu).unwrap();
        let logits = model.forward(&images, Mode::Train, 1).unwrap();
        let loss = candle_nn::loss::cross_entropy(&logits, &labels).unwrap();
        let grads = loss.backward().unwrap();
        let mut norms: BTreeMap<String, f64> = BTreeMap::new();
        for (name, var) in model.params().named_vars() {
            let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
            let sq = match grads.get(var.as_tensor()) {
                Some(g) => g
                    .to_dtype(DType::F64)
                    .unwrap()
                    .sqr()
                    .unwrap()
                    .sum_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap(),
                None => 0.0,
            };
            *norms.entry(group).or_insert(0.0) += sq;
        }
        groups_seen += norms.len();
        for (group, sq) in norms {
            let norm = sq.sqrt();
            if !(norm.is_finite() && norm > 0.0) {
                problems.push(format!("{id}:{group} norm {norm}"));
            }
        }
    }

    let store = ParamStore::new(70, DType::F64, &Device::Cpu);
    let block = AlignBlock::new(8, 3, &store.root()).unwrap();
    let joint = Var::from_tensor(&random_tensor(&mut rng, &[2, 16, 6, 6], DType::F64)).unwrap();
    let weights = random_tensor(&mut rng, &[2, 8, 6, 6], DType::F64);
    let loss = |x: &Tensor| -> f64 {
        (align_features(x, &block).unwrap() * &weights)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };
    let grads = (align_features(joint.as_tensor(), &block).unwrap() * &weights)
        .unwrap()
        .sum_all()
        .unwrap()
        .backward()
        .unwrap();
    let analytic: Vec<f64> = grads.get(&joint).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = joint.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let i = rng.random_range(0..base.len());
        let shifted = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            Tensor::from_vec(v, (2, 16, 6, 6), &Device::Cpu).unwrap()
        };
        let h = 1e-6;
        let numeric = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
        let rel = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-12);
        worst = worst.max(rel);
    }
    if worst >= 1e-2 {
        problems.push(format!("align_features finite-difference relative error {worst:.2e}"));
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{groups_seen} parameter groups over {} backbones have finite nonzero gradients; align_features max relative error {worst:.2e} at 5 coordinates",
                BackboneId::ALL.len()
            )
        } else {
            problems.join("; ")
        },
    )
}

struct Trained {
    verdict: Verdict,
    baseline_checkpoint: Option<PathBuf>,
    config: ExperimentConfig,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_9(out: &Path) -> Trained {
    let mut config = ExperimentConfig::default();
    config.name = "acceptance-training".into();
    config.dataset.root = Some(data_root());
    config.output.dir = out.to_path_buf();
    let fail = |config: ExperimentConfig, detail: String| Trained {
        verdict: verdict(false, detail),
        baseline_checkpoint: None,
        config,
    };
    let splits = match load_splits(&config) {
        Ok(s) => s,
        Err(e) => return fail(config, format!("training data unavailable: {e}")),
    };
    let started = Instant::now();
    let arms = [Toggles::BASELINE, Toggles::MASK, Toggles::FULL];
    let mut top1: Vec<Vec<f64>> = Vec::new();
    let mut fairness = Vec::new();
    let mut baseline_checkpoint = None;
    for toggles in arms {
        let arm = config.with_toggles(toggles);
        let mut accs = Vec::new();
        for &seed in &config.seeds {
            let record = match train_on(&arm, seed, &splits, &TrainOptions::default()) {
                Ok(r) => r,
                Err(e) => return fail(config, format!("{} seed {seed}: {e}", toggles.label())),
            };
            if toggles == Toggles::BASELINE && baseline_checkpoint.is_none() {
                baseline_checkpoint = record.checkpoint.clone();
            }
            fairness.push(record.fairness_hash.clone());
            accs.push(record.top1().unwrap_or(f64::NAN));
        }
        top1.push(accs);
    }
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let (b, m, f) = (mean(&top1[0]), mean(&top1[1]), mean(&top1[2]));
    let fair = fairness.windows(2).all(|w| w[0] == w[1]);
    let tol = 0.5;
    let pass = fair && f >= b - tol && m >= b - tol && f >= m - tol;
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/");
    Trained {
        verdict: verdict(
            pass,
            format!(
                "top-1 % over seeds {:?}: baseline {b:.2} [{}], M {m:.2} [{}], M+R+FFA {f:.2} [{}]; full-baseline {:+.2}, M-baseline {:+.2}, full-M {:+.2} (tolerance -{tol}); fairness hashes equal: {fair}; {minutes:.1} min on CPU",
                config.seeds,
                fmt(&top1[0]),
                fmt(&top1[1]),
                fmt(&top1[2]),
                f - b,
                m - b,
                f - m
            ),
        ),
        baseline_checkpoint,
        config,
    }
}

/// Writes the first `n` CIFAR-10 test images as PNG files.
fn export_test_images(dir: &Path, n: usize) -> Result<(), Error> {
    let source = CifarSource::open(&data_root())?;
    let indices: Vec<usize> = (0..n).collect();
    let data = source.load(Split::Test, &indices)?;
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in data.images.iter().enumerate() {
        img.save_png(dir.join(format!("test{i:05}.png")))?;
    }
    Ok(())
}

fn analyze(dir: &Path, extractor: &BackboneExtractor, csv: &Path) -> Result<AnalysisReport, Error> {
    analyze_corpus(
        dir,
        &[Strategy::Patch, Strategy::Grid, Strategy::Random],
        &MaskPolicy::default(),
        &AnalysisConfig::default(),
        extractor,
        0,
        Some(csv),
    )
}

fn criterion_8(images: &Path, checkpoint: Option<&Path>, csv: &Path) -> (Verdict, Option<AnalysisReport>) {
    let Some(checkpoint) = checkpoint else {
        return (verdict(false, "no trained extractor checkpoint (training criterion failed)"), None);
    };
    let extractor = BackboneExtractor::from_checkpoint(checkpoint).unwrap();
    let report = match analyze(images, &extractor, csv) {
        Ok(r) => r,
        Err(e) => return (verdict(false, format!("analysis failed: {e}")), None),
    };
    let images_used = report.summaries.first().map_or(0, |s| s.images);
    let means = report
        .summaries
        .iter()
        .map(|s| format!("{} dH {:.4} S_ds {:.4} F {:.4}", s.strategy, s.delta_h, s.s_ds, s.f))
        .collect::<Vec<_>>()
        .join("; ");
    let checks = report
        .orderings
        .iter()
        .map(|c| format!("{} {}", c.name, if c.pass { "holds" } else { "violated" }))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = images_used >= 200 && report.orderings.len() == 2 && report.orderings.iter().all(|c| c.pass);
    (
        verdict(
            pass,
            format!("{images_used} CIFAR-10 test images, extractor = trained baseline: {means}; {checks}"),
        ),
        Some(report),
    )
}

fn criterion_10(trained: Option<&Path>, images: &Path, first_csv: Option<&Path>, second_csv: &Path) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let inputs: Vec<Image> = (0..8).map(|_| random_image(&mut rng, 3, 32, 32)).collect();
    let logits = |m: &MaskAnyNet| -> Vec<Vec<f32>> { m.forward(&inputs, Mode::Eval, 0).unwrap().to_vec2().unwrap() };
    let mut problems = Vec::new();
    let mut notes = Vec::new();
    for id in BackboneId::ALL {
        let mut c = ModelConfig::cifar(id);
        c.seed = 42;
        let a = MaskAnyNet::new(c.clone()).unwrap();
        let b = MaskAnyNet::new(c).unwrap();
        let (la, lb, la2) = (logits(&a), logits(&b), logits(&a));
        if la != lb || la != la2 {
            problems.push(format!("{id} eval logits differ"));
        }
    }
    notes.push(format!("eval logits bit-identical for {} backbones", BackboneId::ALL.len()));
    if let Some(dir) = trained {
        let (a, b) = (MaskAnyNet::load(dir).unwrap(), MaskAnyNet::load(dir).unwrap());
        if logits(&a) != logits(&b) {
            problems.push("trained checkpoint logits differ across loads".into());
        } else {
            notes.push("trained checkpoint reloads bit-identically".into());
        }
    }
    match (trained, first_csv) {
        (Some(ckpt), Some(first)) => {
            let extractor = BackboneExtractor::from_checkpoint(ckpt).unwrap();
            match analyze(images, &extractor, second_csv) {
                Ok(_) => {
                    let (x, y) = (std::fs::read(first).unwrap(), std::fs::read(second_csv).unwrap());
                    if x == y {
                        notes.push(format!("repeated analysis CSVs identical ({} bytes)", x.len()));
                    } else {
                        problems.push("analysis CSVs differ".into());
                    }
                }
                Err(e) => problems.push(format!("repeat analysis failed: {e}")),
            }
        }
        _ => {
            // Without the trained extractor, repeat the analysis with a seeded one.
            let extractor = BackboneExtractor::seeded(BackboneId::ResnetTiny, 0).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for i in 0..20 {
                random_image(&mut rng, 3, 32, 32)
                    .save_png(dir.path().join(format!("r{i:02}.png")))
                    .unwrap();
            }
            let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
            analyze(dir.path(), &extractor, &p).unwrap();
            analyze(dir.path(), &extractor, &q).unwrap();
            if std::fs::read(&p).unwrap() != std::fs::read(&q).unwrap() {
                problems.push("analysis CSVs differ".into());
            } else {
                notes.push("repeated analysis CSVs identical (seeded extractor, synthetic images)".into());
            }
        }
    }
    verdict(problems.is_empty(), if problems.is_empty() { notes.join("; ") } else { problems.join("; ") })
}

#[test]
fn acceptance_criteria() {
    let mut results = BTreeMap::new();
    report(&mut results, 1, criterion_1());
    report(&mut results, 2, criterion_2());
    report(&mut results, 3, criterion_3());
    report(&mut results, 4, criterion_4());
    report(&mut results, 5, criterion_5());
    report(&mut results, 6, criterion_6());
    report(&mut results, 7, criterion_7());

    let work = tempfile::tempdir().unwrap();
    let trained = criterion_9(&work.path().join("runs"));
    let checkpoint = trained.baseline_checkpoint.clone();
    report(&mut results, 9, trained.verdict);
    log_config(&trained.config);

    let images = work.path().join("cifar-test-png");
    let first_csv = work.path().join("analysis-1.csv");
    let (v8, report8) = match export_test_images(&images, AnalysisConfig::default().pairs) {
        Ok(()) => criterion_8(&images, checkpoint.as_deref(), &first_csv),
        Err(e) => (verdict(false, format!("natural images unavailable: {e}")), None),
    };
    report(&mut results, 8, v8);
    report(
        &mut results,
        10,
        criterion_10(
            checkpoint.as_deref(),
            &images,
            report8.as_ref().and(Some(first_csv.as_path())),
            &work.path().join("analysis-2.csv"),
        ),
    );

    println!("summary:");
    for (id, v) in &results {
        println!("criterion {id} {}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<u32> = results.iter().filter(|(_, v)| !v.pass).map(|(id, _)| *id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}

fn log_config(config: &ExperimentConfig) {
    println!(
        "training setup: {} seeds {:?}, {} train / {} val images, {} epochs, batch {}, backbone {}, mask {} at {}",
        config.name,
        config.seeds,
        config.dataset.train_subset.unwrap_or(50_000),
        config.dataset.val_subset,
        config.train.epochs,
        config.train.batch_size,
        config.model.backbone,
        config.mask.strategy,
        config.mask.ratio
    );
}
