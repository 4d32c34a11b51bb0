//! End-to-end gradient probe of the default detector.

use freqdetect::image_io::{to_tensor, ImageU8};
use freqdetect::model::{Detector, DetectorConfig, Mode};
use freqdetect::semantic::stub_embed;
use freqdetect::Tape;

pub const TOL: f64 = 1e-3;

pub const PROBES: [(&str, usize); 12] = [
    ("semantic.w_q", 5),
    ("semantic.w_v", 17),
    ("stem.weight", 3),
    ("dwt.conv1.weight", 40),
    ("fadc.0.weight", 100),
    ("fadc.1.pred.weight", 7),
    ("fadc.2.lambda.weight", 2),
    ("fadc.1.select.bias", 1),
    ("attn.spatial.weight", 30),
    ("head.0.conv.weight", 11),
    ("head.1.bn.weight", 5),
    ("fc.weight", 9),
];

pub fn probe_image(seed: u8) -> ImageU8 {
    ImageU8::from_fn(64, 64, |x, y| {
        let v = (x * 7 + y * 13 + usize::from(seed) * 29) % 251;
        [v as u8, (v * 3 % 256) as u8, ((x ^ y) * 4 % 256) as u8]
    })
}

/// `(probe, analytic, numeric, relative error)` for every entry of [`PROBES`].
pub fn detector_probe() -> Vec<(String, f64, f64, f64)> {
    let det = Detector::build(DetectorConfig::default()).unwrap();
    let img = probe_image(4);
    let feats = det.local_features(&to_tensor(&img)).unwrap();
    let phi = stub_embed(&img, 768).to_tensor().reshape(vec![1, 768]).unwrap();
    let mut t = Tape::new();
    let f = det.forward(&mut t, &feats, Some(&phi), Mode::Eval, true).unwrap();
    let grads = t.backward(f.logits).unwrap();
    // bilinear sampling and ReLU make the logit piecewise smooth; a small step stays inside one piece
    let h = 1e-7;
    PROBES
        .iter()
        .map(|&(name, j)| {
            let i = det.store().index_of(name).unwrap();
            let analytic = grads.get(f.bound[i]).unwrap().data()[j];
            let at = |delta: f64| {
                let mut d = det.clone();
                d.store_mut().tensor_mut(i).data_mut()[j] += delta;
                d.logits(&feats, Some(&phi)).unwrap()[0]
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            (format!("{name}[{j}]"), analytic, numeric, rel)
        })
        .collect()
}
