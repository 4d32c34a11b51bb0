//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

mod common;

use std::io::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::oracles::{ap_oracle, best_ba_oracle, fadc_oracle, fuzz_case, npr_oracle, run_fadc, Fadc};
use common::{fd, probe, rng, uniform};
use freqdetect::features::{npr_extract, NprConfig};
use freqdetect::frequency::{band_decompose, haar_dwt, haar_idwt, BandSpec};
use freqdetect::image_io::{to_tensor, ImageU8, Split};
use freqdetect::loss::{focal_loss, focal_loss_grad, sigmoid};
use freqdetect::metrics::{average_precision, calibrate_threshold, Confusion};
use freqdetect::model::{Branch, Detector, DetectorConfig};
use freqdetect::perturb::{sweep_images, PerturbKind, PerturbSpec, RobustnessReport};
use freqdetect::semantic::{EmbeddingFile, EmbeddingRecord};
use freqdetect::tensor::fft::{fft2, ifft2, to_complex};
use freqdetect::tensor::Dilation;
use freqdetect::toy::{generate, upsample_nearest, ToyItem, ToyKind, ToyLayout};
use freqdetect::train::{evaluate, prepare_image, train, FocalLossConfig, Sample, TrainConfig};
use freqdetect::weights::ParamStore;
use freqdetect::{Tape, Tensor};
use rand::Rng as _;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn autodiff() -> Outcome {
    let start = Instant::now();
    let ops = fd::all();
    let (worst_op, op_err) = ops.iter().fold(("", 0.0f64), |a, (n, e)| if *e > a.1 { (n, *e) } else { a });
    ensure!(op_err < fd::TOL, "{worst_op}: rel err {op_err:.2e}");
    let probes = probe::detector_probe();
    let (worst_probe, probe_err) =
        probes.iter().fold(("", 0.0f64), |a, p| if p.3 > a.1 { (p.0.as_str(), p.3) } else { a });
    ensure!(probe_err < probe::TOL, "{worst_probe}: rel err {probe_err:.2e}");
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(60), "took {took:.1?}");
    Ok(format!(
        "{} op cases worst {op_err:.1e} ({worst_op}); {} detector probes worst {probe_err:.1e}; {took:.1?}",
        ops.len(),
        probes.len()
    ))
}

fn frequency() -> Outcome {
    let mut r = rng("accept-freq");
    let mut haar: f64 = 0.0;
    let mut fft: f64 = 0.0;
    let mut bands: f64 = 0.0;
    for shape in [[1, 3, 8, 8], [2, 4, 16, 16], [1, 16, 64, 64]] {
        let x = uniform(&mut r, &shape, -5.0, 5.0);
        haar = haar.max(haar_idwt(&haar_dwt(&x).unwrap()).unwrap().max_abs_diff(&x));
        fft = fft.max(ifft2(&fft2(&x).unwrap()).unwrap().max_abs_diff(&to_complex(&x)));
        for b in 1..=6 {
            let parts = band_decompose(&x, &BandSpec::radial(b, shape[2], shape[3]).unwrap()).unwrap();
            let mut sum = Tensor::zeros(x.shape());
            for p in &parts {
                for (s, v) in sum.data_mut().iter_mut().zip(p.data()) {
                    *s += v;
                }
            }
            bands = bands.max(sum.max_abs_diff(&x));
        }
    }
    ensure!(haar < 1e-10, "Haar round-trip {haar:.2e}");
    ensure!(fft < 1e-10, "FFT round-trip {fft:.2e}");
    ensure!(bands < 1e-9, "band sum {bands:.2e}");
    for b in 1..=7 {
        for (h, w) in [(8, 8), (16, 4), (64, 64)] {
            let s = BandSpec::radial(b, h, w).unwrap();
            for bin in 0..h * w {
                let total: f64 = s.masks().iter().map(|m| m[bin]).sum();
                ensure!(total == 1.0, "masks b={b} {h}x{w} bin {bin} sum to {total}");
            }
        }
    }
    Ok(format!("Haar {haar:.1e}, FFT {fft:.1e}, band sum {bands:.1e}, masks sum to exactly 1"))
}

fn fadc() -> Outcome {
    let mut r = rng("accept-fadc");
    let mut reduce: f64 = 0.0;
    for d_base in [1.0, 2.0, 3.0] {
        let x = uniform(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
        let mut p = Fadc::random(&mut r, 3, 3, 4);
        p.pred_w = Tensor::zeros([1, 3, 3, 3]);
        p.pred_b = Tensor::full([1], 1.0);
        p.lam_w = Tensor::zeros([1, 3, 1, 1]);
        p.lam_b = Tensor::zeros([1]);
        let y = run_fadc(&x, &p, d_base);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(p.weight.clone()));
        let c = t.conv2d(xv, wv, None, 1, Dilation::Scalar(d_base), 1).unwrap();
        reduce = reduce.max(y.max_abs_diff(t.value(c)));
    }
    ensure!(reduce < 1e-12, "reduction {reduce:.2e}");
    let mut general: f64 = 0.0;
    for (c, k, d_base) in [(2, 3, 1.0), (3, 3, 1.7), (2, 5, 0.6), (4, 3, 2.3)] {
        let x = uniform(&mut r, &[2, c, 8, 8], -1.0, 1.0);
        let p = Fadc::random(&mut r, c, k, 2);
        general = general.max(run_fadc(&x, &p, d_base).max_abs_diff(&fadc_oracle(&x, &p, d_base)));
    }
    ensure!(general < 1e-12, "oracle {general:.2e}");
    Ok(format!("dilated-conv reduction {reduce:.1e}, scalar oracle {general:.1e}"))
}

fn npr() -> Outcome {
    let mut r = rng("accept-npr");
    for l in [2, 4] {
        for i in 0..100 {
            let img = Tensor::from_fn([1, 3, 8, 8], |_| f64::from(r.gen_range(0u8..=255)) / 255.0);
            let f = npr_extract(&img, NprConfig { l }).unwrap();
            ensure!(f.data() == &npr_oracle(&img, l)[..], "l={l} image {i} differs from the oracle");
        }
    }
    for i in 0..20 {
        let small = ImageU8::from_fn(16, 16, |_, _| std::array::from_fn(|_| r.gen()));
        let f = npr_extract(&to_tensor(&upsample_nearest(&small)), NprConfig::default()).unwrap();
        ensure!(f.data().iter().all(|&v| v == 0.0), "upsampled image {i} has nonzero NPR");
    }
    Ok("200 oracle images exact; 20 nearest-upsampled images give exactly zero".into())
}

fn focal() -> Outcome {
    let mut r = rng("accept-focal");
    let z: Vec<f64> = (0..32).map(|_| r.gen_range(-6.0..6.0)).collect();
    let y: Vec<f64> = (0..32).map(|i| (i % 2) as f64).collect();
    let bce = z.iter().zip(&y).map(|(&z, &y)| -(y * sigmoid(z).ln() + (1.0 - y) * (1.0 - sigmoid(z)).ln())).sum::<f64>()
        / 32.0;
    let reduce = (focal_loss(&z, &y, 0.5, 0.0).unwrap() - 0.5 * bce).abs();
    ensure!(reduce < 1e-12, "gamma=0 differs from BCE/2 by {reduce:.2e}");
    let worked = focal_loss(&[0.0], &[1.0], 0.5, 2.0).unwrap();
    let want = 0.5 * 0.25 * 2f64.ln();
    ensure!((worked - want).abs() < 1e-15, "worked value {worked} vs {want}");
    let z10 = &z[..10];
    let y10 = &y[..10];
    let g = focal_loss_grad(z10, y10, 0.5, 2.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let at = |d: f64| {
            let mut zz = z10.to_vec();
            zz[i] += d;
            focal_loss(&zz, y10, 0.5, 2.0).unwrap()
        };
        let num = (at(1e-6) - at(-1e-6)) / 2e-6;
        worst = worst.max((g[i] - num).abs() / num.abs().max(1e-3));
    }
    ensure!(worst < 1e-6, "gradient rel err {worst:.2e}");
    Ok(format!("BCE reduction {reduce:.1e}, worked value {worked:.7}, gradient {worst:.1e}"))
}

fn metrics() -> Outcome {
    let mut r = rng("accept-metrics");
    for i in 0..100 {
        let (s, l) = fuzz_case(&mut r);
        let (got, want) = (average_precision(&s, &l).unwrap(), ap_oracle(&s, &l));
        ensure!(got == want, "AP case {i}: {got} vs {want}");
    }
    for i in 0..100 {
        let (s, l) = fuzz_case(&mut r);
        let t = calibrate_threshold(&s, &l).unwrap();
        let (got, want) = (Confusion::at(&s, &l, t).balanced_accuracy(), best_ba_oracle(&s, &l));
        ensure!(got == want, "calibration case {i}: BA {got} vs {want}");
    }
    Ok("100 AP and 100 calibration fuzz cases match exactly".into())
}

// ---------------------------------------------------------------------------
// Surrogate experiment on the synthetic corpus.

fn desk_model() -> DetectorConfig {
    DetectorConfig { width: 8, n_fadc_blocks: 1, head_channels: vec![16, 32], d_k: 16, d_v: 16, heads: 2, ..Default::default() }
}

fn desk_train() -> TrainConfig {
    TrainConfig { lr: 2e-3, batch: 16, epochs: 4, warmup_iters: 10, ..Default::default() }
}

struct Trained {
    det: Detector,
    in_dist: f64,
    unseen: f64,
    test: f64,
}

fn fit(items: &[ToyItem], model: DetectorConfig) -> Trained {
    let mut det = Detector::build(model).unwrap();
    let prep = |det: &Detector, keep: &dyn Fn(&ToyItem) -> bool| -> Vec<Sample> {
        items
            .iter()
            .filter(|i| keep(i))
            .map(|i| prepare_image(det, &i.image, &i.entry.path, i.entry.label, None).unwrap())
            .collect()
    };
    let tr = prep(&det, &|i| i.entry.split == Split::Train);
    let va = prep(&det, &|i| i.entry.split == Split::Val);
    train(&mut det, &tr, &va, &desk_train(), &FocalLossConfig::default(), |_| {}).unwrap();
    let test = |kinds: &[ToyKind]| {
        let s = prep(&det, &|i| i.entry.split == Split::Test && kinds.contains(&i.kind));
        evaluate(&det, &s, 32).unwrap().acc
    };
    Trained {
        in_dist: test(&[ToyKind::Real, ToyKind::Nearest]),
        unseen: test(&[ToyKind::Real, ToyKind::Bilinear]),
        test: test(&[ToyKind::Real, ToyKind::Nearest, ToyKind::Bilinear]),
        det,
    }
}

struct Experiment {
    items: Vec<ToyItem>,
    full: Trained,
}

fn experiment(keep: &mut Option<Experiment>) -> Outcome {
    let start = Instant::now();
    let items = generate(&ToyLayout::standard(400, 100, 120, 11));
    let full = fit(&items, desk_model());
    let no_npr = fit(&items, desk_model().without(Branch::Npr));
    let took = start.elapsed();
    let detail = format!(
        "full in-dist {:.3} unseen {:.3} test {:.3}; -npr test {:.3}; {took:.0?}",
        full.in_dist, full.unseen, full.test, no_npr.test
    );
    *keep = Some(Experiment { items, full });
    let full = &keep.as_ref().unwrap().full;
    ensure!(full.in_dist >= 0.95, "in-distribution ACC below 0.95: {detail}");
    ensure!(full.unseen >= 0.75, "unseen ACC below 0.75: {detail}");
    ensure!(no_npr.test < full.test, "dropping NPR did not lower ACC: {detail}");
    ensure!(took < Duration::from_secs(600), "over 10 minutes: {detail}");
    Ok(detail)
}

fn blur_sweep(det: &Detector, images: &[(String, u8, ImageU8)]) -> RobustnessReport {
    let specs: Vec<PerturbSpec> = (0..4).map(|s| PerturbSpec::new(PerturbKind::Blur, f64::from(s), 1).unwrap()).collect();
    sweep_images(det, images, &specs, None, 32).unwrap()
}

fn robustness(exp: Option<&Experiment>) -> Outcome {
    let exp = exp.ok_or("needs the surrogate experiment")?;
    let images: Vec<(String, u8, ImageU8)> = exp
        .items
        .iter()
        .filter(|i| i.entry.split == Split::Test && i.kind != ToyKind::Bilinear)
        .map(|i| (i.entry.path.clone(), i.entry.label, i.image.clone()))
        .collect();
    let full = blur_sweep(&exp.full.det, &images);
    let again = blur_sweep(&exp.full.det, &images);
    let bits = |r: &RobustnessReport| -> Vec<(u64, u64)> {
        r.rows.iter().map(|x| (x.acc.to_bits(), x.ap.to_bits())).collect()
    };
    let npr_only = DetectorConfig { use_grad: false, use_semantic: false, ..desk_model() };
    let npr = blur_sweep(&fit(&exp.items, npr_only).det, &images);
    let acc = |r: &RobustnessReport, s: f64| r.get(PerturbKind::Blur, s).unwrap().acc;
    let drop = |r: &RobustnessReport| acc(r, 0.0) - acc(r, 2.0);
    let ladder = |r: &RobustnessReport| r.rows.iter().map(|x| format!("{:.3}", x.acc)).collect::<Vec<_>>().join("/");
    let detail = format!(
        "blur 0/1/2/3 ACC full {} npr-only {}; drop at 2: {:.3} vs {:.3}",
        ladder(&full),
        ladder(&npr),
        drop(&full),
        drop(&npr)
    );
    ensure!(bits(&full) == bits(&again), "sweep not reproducible: {detail}");
    ensure!(drop(&full) < drop(&npr), "full model degrades at least as much: {detail}");
    Ok(format!("{detail}; reproducible"))
}

fn serialization() -> Outcome {
    const FWTS: &[u8] = include_bytes!("fixtures/golden.fwts");
    const FEMB: &[u8] = include_bytes!("fixtures/golden.femb");
    let mut s = ParamStore::new();
    s.add_param("conv.weight", Tensor::new([2, 1, 1, 2], vec![0.5, -1.25, 3.0, 1e-300]).unwrap()).unwrap();
    s.add_param("bias", Tensor::new([3], vec![0.0, -0.0, 2f64.powi(-20)]).unwrap()).unwrap();
    s.add_buffer("calibration.threshold", Tensor::new([1], vec![0.1]).unwrap()).unwrap();
    ensure!(s.encode() == FWTS, "FWTS golden bytes differ");
    let mut f = EmbeddingFile::new(3);
    f.insert(EmbeddingRecord { id: "real/a.ppm".into(), vector: vec![1.0, -0.5, 0.25] }).unwrap();
    let v = [0.1f32, 0.0, -3.5].iter().map(|&x| f64::from(x)).collect();
    f.insert(EmbeddingRecord { id: "fake/é.ppm".into(), vector: v }).unwrap();
    ensure!(f.encode() == FEMB, "FEMB golden bytes differ");

    let det = Detector::build(DetectorConfig::default()).unwrap();
    let bytes = det.store().encode();
    let back = ParamStore::decode(&bytes).unwrap();
    let same = back.iter().zip(det.store().iter()).all(|((n, a), (m, b))| {
        n == m && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure!(same && back.len() == det.store().len(), "detector weights did not round-trip");
    let emb = EmbeddingFile::decode(FEMB).unwrap();
    ensure!(emb.encode() == FEMB, "FEMB re-encode differs");
    Ok(format!("golden files byte-identical; {} detector tensors round-trip bit-exactly", back.len()))
}

fn main() {
    let mut exp = None;
    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("autodiff integrity", Box::new(autodiff)),
        ("frequency machinery", Box::new(frequency)),
        ("FADC reduction", Box::new(fadc)),
        ("NPR oracle equivalence", Box::new(npr)),
        ("focal loss", Box::new(focal)),
        ("metrics", Box::new(metrics)),
        ("serialization", Box::new(serialization)),
    ];
    let mut failed = 0;
    let mut report = |name: &str, outcome: std::thread::Result<Outcome>| {
        let line = match outcome {
            Ok(Ok(detail)) => format!("PASS  {name}: {detail}"),
            Ok(Err(why)) => format!("FAIL  {name}: {why}"),
            Err(_) => format!("FAIL  {name}: panicked"),
        };
        if line.starts_with("FAIL") {
            failed += 1;
        }
        println!("{line}");
        let _ = std::io::stdout().flush();
    };
    for (name, mut f) in criteria {
        report(name, panic::catch_unwind(AssertUnwindSafe(&mut f)));
    }
    report("surrogate generalization experiment", panic::catch_unwind(AssertUnwindSafe(|| experiment(&mut exp))));
    report("robustness sweep", panic::catch_unwind(AssertUnwindSafe(|| robustness(exp.as_ref()))));
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
