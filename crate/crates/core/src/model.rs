//! The assembled detector: forensic branches, semantic fusion, wavelet and
//! frequency-adaptive stages, and the classification head.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::features::{gradient_extract, npr_extract, sobel_gradient, FixedBackbone, NprConfig};
use crate::frequency::{fadc_block, spatial_attention, BandSpec, FadcVars};
use crate::image_io::{to_tensor, ImageU8};
use crate::rng;
use crate::semantic::{fuse, stub_embed, AttentionVars, EmbeddingFile};
use crate::tensor::{BatchStats, Dilation, Tape, Tensor, Var};
use crate::weights::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientKind {
    /// Input gradient of the frozen backbone's summed response.
    Autodiff,
    Sobel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticSource {
    File,
    Stub,
}

/// A removable feature branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Npr,
    Grad,
    Semantic,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Npr => "npr",
            Branch::Grad => "grad",
            Branch::Semantic => "semantic",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "npr" => Ok(Branch::Npr),
            "grad" => Ok(Branch::Grad),
            "semantic" => Ok(Branch::Semantic),
            other => Err(Error::InvalidArgument(format!("unknown branch {other:?} (npr, grad, semantic)"))),
        }
    }
}

/// Architecture and branch switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub use_npr: bool,
    pub use_grad: bool,
    pub use_semantic: bool,
    pub gradient: GradientKind,
    /// Mask negative gradients at ReLUs when extracting autodiff gradients.
    pub guided: bool,
    pub npr_l: usize,
    pub semantic_source: SemanticSource,
    pub embed_dim: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Channels of the wavelet and frequency-adaptive stages.
    pub width: usize,
    pub n_fadc_blocks: usize,
    pub kernel: usize,
    pub bands: usize,
    pub d_base: f64,
    /// Output channels of the stride-2 head stages.
    pub head_channels: Vec<usize>,
    pub dropout: f64,
    pub image_size: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            use_npr: true,
            use_grad: true,
            use_semantic: true,
            gradient: GradientKind::Autodiff,
            guided: false,
            npr_l: 2,
            semantic_source: SemanticSource::Stub,
            embed_dim: crate::semantic::DEFAULT_DIM,
            heads: 4,
            d_k: 64,
            d_v: 64,
            width: 16,
            n_fadc_blocks: 3,
            kernel: 3,
            bands: 4,
            d_base: 1.0,
            head_channels: vec![32, 64],
            dropout: 0.2,
            image_size: 64,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.use_npr || self.use_grad) {
            return bad(if self.use_semantic {
                "the semantic branch needs a local branch (npr or grad) to attend over".into()
            } else {
                "all feature branches are disabled".into()
            });
        }
        let s = self.image_size;
        let down = 1usize << self.head_channels.len();
        if !s.is_power_of_two() || s < 8 || s < 2 * down {
            return bad(format!("image_size {s} must be a power of two of at least {}", (2 * down).max(8)));
        }
        if self.use_npr && (self.npr_l < 2 || s % self.npr_l != 0) {
            return bad(format!("npr_l {} must be at least 2 and divide image_size {s}", self.npr_l));
        }
        if self.use_semantic {
            if self.embed_dim == 0 || self.d_k == 0 || self.d_v == 0 || self.heads == 0 {
                return bad("embed_dim, d_k, d_v and heads must be positive".into());
            }
            if self.d_k % self.heads != 0 || self.d_v % self.heads != 0 {
                return bad(format!("{} heads must divide d_k={} and d_v={}", self.heads, self.d_k, self.d_v));
            }
        }
        if self.width == 0 || self.head_channels.iter().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.bands == 0 {
            return bad("bands must be positive".into());
        }
        if !(self.d_base > 0.0 && self.d_base.is_finite()) {
            return bad(format!("d_base {} must be positive", self.d_base));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1] and bn_eps be positive".into());
        }
        Ok(())
    }

    /// The same configuration with `branch` switched off.
    pub fn without(&self, branch: Branch) -> Self {
        let mut c = self.clone();
        match branch {
            Branch::Npr => c.use_npr = false,
            Branch::Grad => c.use_grad = false,
            Branch::Semantic => c.use_semantic = false,
        }
        c
    }

    pub fn npr_channels(&self) -> usize {
        if self.use_npr {
            NprConfig { l: self.npr_l }.channels(3)
        } else {
            0
        }
    }

    pub fn grad_channels(&self) -> usize {
        match (self.use_grad, self.gradient) {
            (false, _) => 0,
            (true, GradientKind::Autodiff) => 3,
            (true, GradientKind::Sobel) => 6,
        }
    }

    /// Channels of the concatenated local forensic map.
    pub fn local_channels(&self) -> usize {
        self.npr_channels() + self.grad_channels()
    }

    /// Channels after semantic fusion.
    pub fn fused_channels(&self) -> usize {
        self.local_channels() + if self.use_semantic { self.d_v } else { 0 }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Training mode draws dropout masks from `(seed, step)`; evaluation mode
/// uses running batch-norm statistics and no dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64, step: u64 },
    Eval,
}

/// Output of [`Detector::forward`].
#[derive(Debug)]
pub struct Forward {
    /// `[N]` logits.
    pub logits: Var,
    /// One var per store entry, in store order.
    pub bound: Vec<Var>,
    /// Batch statistics per batch-norm layer prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

pub const THRESHOLD_NAME: &str = "calibration.threshold";

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    store: ParamStore,
    backbone: FixedBackbone,
    band_spec: BandSpec,
}

impl Detector {
    /// Deterministic He-uniform initialisation from `config.seed`. Every
    /// tensor draws from its own named substream.
    pub fn build(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let conv = |store: &mut ParamStore, name: &str, o: usize, i: usize, k: usize, bias: bool| {
            let mut r = rng::substream(seed, &format!("init.{name}"));
            store.add_param(&format!("{name}.weight"), rng::he_uniform(&mut r, &[o, i, k, k], i * k * k))?;
            if bias {
                store.add_param(&format!("{name}.bias"), Tensor::zeros([o]))?;
            }
            Ok::<(), Error>(())
        };
        let (w, k) = (config.width, config.kernel);
        if config.use_semantic {
            let mut r = rng::substream(seed, "init.semantic");
            let c = config.local_channels();
            let (d, dk, dv) = (config.embed_dim, config.d_k, config.d_v);
            store.add_param("semantic.w_q", rng::he_uniform(&mut r, &[d, dk], d))?;
            store.add_param("semantic.w_k", rng::he_uniform(&mut r, &[c, dk], c))?;
            store.add_param("semantic.w_v", rng::he_uniform(&mut r, &[c, dv], c))?;
        }
        conv(&mut store, "stem", w, config.fused_channels(), 1, true)?;
        conv(&mut store, "dwt.conv1", w, w, 3, true)?;
        conv(&mut store, "dwt.conv2", w, w, 3, true)?;
        for b in 0..config.n_fadc_blocks {
            let p = format!("fadc.{b}");
            conv(&mut store, &p, w, w, k, false)?;
            let mut r = rng::substream(seed, &format!("init.{p}.pred"));
            let pred = rng::he_uniform(&mut r, &[1, w, 3, 3], w * 9).map(|v| 0.1 * v);
            store.add_param(&format!("{p}.pred.weight"), pred)?;
            store.add_param(&format!("{p}.pred.bias"), Tensor::full([1], 1.0))?;
            conv(&mut store, &format!("{p}.lambda"), 1, w, 1, true)?;
            conv(&mut store, &format!("{p}.select"), config.bands, w, 1, true)?;
        }
        conv(&mut store, "attn.spatial", 1, 2, 7, true)?;
        let mut c_in = w;
        for (i, &c) in config.head_channels.iter().enumerate() {
            let p = format!("head.{i}");
            conv(&mut store, &format!("{p}.conv"), c, c_in, 3, true)?;
            store.add_param(&format!("{p}.bn.weight"), Tensor::full([c], 1.0))?;
            store.add_param(&format!("{p}.bn.bias"), Tensor::zeros([c]))?;
            store.add_buffer(&format!("{p}.bn.running_mean"), Tensor::zeros([c]))?;
            store.add_buffer(&format!("{p}.bn.running_var"), Tensor::full([c], 1.0))?;
            c_in = c;
        }
        let mut r = rng::substream(seed, "init.fc");
        store.add_param("fc.weight", rng::he_uniform(&mut r, &[c_in, 1], c_in))?;
        store.add_param("fc.bias", Tensor::zeros([1]))?;
        store.add_buffer(THRESHOLD_NAME, Tensor::zeros([1]))?;
        let backbone = FixedBackbone::new(seed);
        let band_spec = BandSpec::radial(config.bands, config.image_size, config.image_size)?;
        Ok(Detector { config, store, backbone, band_spec })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &FixedBackbone {
        &self.backbone
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Decision threshold on logits, set by validation calibration.
    pub fn threshold(&self) -> f64 {
        self.store.get(THRESHOLD_NAME).expect("threshold buffer").data()[0]
    }

    pub fn set_threshold(&mut self, t: f64) {
        let i = self.store.index_of(THRESHOLD_NAME).expect("threshold buffer");
        self.store.tensor_mut(i).data_mut()[0] = t;
    }

    pub fn save_weights(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_weights(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.store.load_into(path)
    }

    /// Local forensic map `[1, C_local, H, W]` for a `1 × 3 × H × W` image.
    pub fn local_features(&self, img: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = img.dims4()?;
        let s = self.config.image_size;
        if n != 1 || c != 3 || h != s || w != s {
            return Err(shape_err(format!("expected a 1x3x{s}x{s} image, got {:?}", img.shape())));
        }
        let mut parts = Vec::new();
        if self.config.use_npr {
            parts.push(npr_extract(img, NprConfig { l: self.config.npr_l })?);
        }
        if self.config.use_grad {
            parts.push(match self.config.gradient {
                GradientKind::Autodiff => gradient_extract(img, &self.backbone, self.config.guided)?,
                GradientKind::Sobel => sobel_gradient(img)?,
            });
        }
        let mut t = Tape::new();
        let vars: Vec<Var> = parts.into_iter().map(|p| t.constant(p)).collect();
        let cat = t.concat(&vars, 1)?;
        Ok(t.value(cat).clone())
    }

    /// Semantic embedding `[D]` for an image, or `None` when the branch is
    /// off. File lookups use `id`, normally the manifest path.
    pub fn embedding(
        &self,
        img: &ImageU8,
        id: &str,
        file: Option<&EmbeddingFile>,
    ) -> Result<Option<Tensor>> {
        if !self.config.use_semantic {
            return Ok(None);
        }
        let rec = match self.config.semantic_source {
            SemanticSource::Stub => stub_embed(img, self.config.embed_dim),
            SemanticSource::File => {
                let f = file.ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
                if f.dim() != self.config.embed_dim {
                    return Err(shape_err(format!(
                        "embedding file has D={}, config expects {}",
                        f.dim(),
                        self.config.embed_dim
                    )));
                }
                f.get(id).cloned().ok_or_else(|| Error::MissingEmbedding(id.to_string()))?
            }
        };
        Ok(Some(rec.to_tensor()))
    }

    /// Record the network on `t` for a batch of local maps `[N, C_local, H, W]`
    /// and embeddings `[N, D]`. With `trainable`, learnable tensors enter as
    /// parameters so `backward` reaches them.
    pub fn forward(
        &self,
        t: &mut Tape,
        feats: &Tensor,
        phi: Option<&Tensor>,
        mode: Mode,
        trainable: bool,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (n, c, h, w) = feats.dims4()?;
        if c != cfg.local_channels() || h != cfg.image_size || w != cfg.image_size {
            return Err(shape_err(format!(
                "local features {:?} do not match [N, {}, {s}, {s}]",
                feats.shape(),
                cfg.local_channels(),
                s = cfg.image_size
            )));
        }
        let bound: Vec<Var> = (0..self.store.len())
            .map(|i| {
                let v = self.store.tensor(i).clone();
                if trainable && self.store.is_trainable(i) {
                    t.param(v)
                } else {
                    t.constant(v)
                }
            })
            .collect();
        let p = |name: &str| bound[self.store.index_of(name).unwrap_or_else(|| panic!("no tensor {name}"))];
        let one = Dilation::Scalar(1.0);

        let mut x = t.constant(feats.clone());
        if cfg.use_semantic {
            let phi = phi.ok_or_else(|| Error::MissingEmbedding("semantic branch input".into()))?;
            if phi.shape() != [n, cfg.embed_dim] {
                return Err(shape_err(format!("embeddings {:?}, expected [{n}, {}]", phi.shape(), cfg.embed_dim)));
            }
            let phi = t.constant(phi.clone());
            let att = AttentionVars { w_q: p("semantic.w_q"), w_k: p("semantic.w_k"), w_v: p("semantic.w_v") };
            x = fuse(t, phi, x, &att, cfg.heads)?;
        }
        x = t.conv2d(x, p("stem.weight"), Some(p("stem.bias")), 1, one.clone(), 1)?;

        // wavelet split: residual refinement of the approximation band
        let wd = cfg.width;
        let bands = t.haar(x)?;
        let approx = t.slice(bands, 1, 0, wd)?;
        let detail = t.slice(bands, 1, wd, 3 * wd)?;
        let r = t.conv2d(approx, p("dwt.conv1.weight"), Some(p("dwt.conv1.bias")), 1, one.clone(), 1)?;
        let r = t.relu(r)?;
        let r = t.conv2d(r, p("dwt.conv2.weight"), Some(p("dwt.conv2.bias")), 1, one.clone(), 1)?;
        let approx = t.add(approx, r)?;
        let packed = t.concat(&[approx, detail], 1)?;
        x = t.haar_inverse(packed)?;

        for b in 0..cfg.n_fadc_blocks {
            let q = |s: &str| p(&format!("fadc.{b}{s}"));
            let vars = FadcVars {
                weight: q(".weight"),
                pred_w: q(".pred.weight"),
                pred_b: q(".pred.bias"),
                lam_w: q(".lambda.weight"),
                lam_b: q(".lambda.bias"),
                sel_w: q(".select.weight"),
                sel_b: q(".select.bias"),
            };
            x = fadc_block(t, x, &vars, &self.band_spec, cfg.d_base)?;
        }
        x = spatial_attention(t, x, p("attn.spatial.weight"), p("attn.spatial.bias"))?;

        let mut bn_stats = Vec::new();
        for i in 0..cfg.head_channels.len() {
            let q = |s: &str| p(&format!("head.{i}.{s}"));
            x = t.conv2d(x, q("conv.weight"), Some(q("conv.bias")), 2, one.clone(), 1)?;
            x = t.relu(x)?;
            let (gamma, beta) = (q("bn.weight"), q("bn.bias"));
            x = match mode {
                Mode::Train { seed, step } => {
                    let (y, stats) = t.batchnorm_train(x, gamma, beta, cfg.bn_eps)?;
                    bn_stats.push((format!("head.{i}.bn"), stats));
                    t.dropout(y, cfg.dropout, true, seed, &format!("dropout.head.{i}.{step}"))?
                }
                Mode::Eval => {
                    let get = |s: &str| self.store.get(&format!("head.{i}.bn.{s}")).expect("bn buffer");
                    let (m, v) = (get("running_mean").data(), get("running_var").data());
                    t.batchnorm_inference(x, gamma, beta, m, v, cfg.bn_eps)?
                }
            };
        }
        let pooled = t.mean_axis(x, 3)?;
        let pooled = t.mean_axis(pooled, 2)?;
        let ch = t.shape(pooled)[1];
        let pooled = t.reshape(pooled, &[n, ch])?;
        let z = t.matmul(pooled, p("fc.weight"))?;
        let bias = t.reshape(p("fc.bias"), &[1, 1])?;
        let z = t.add(z, bias)?;
        let logits = t.reshape(z, &[n])?;
        Ok(Forward { logits, bound, bn_stats })
    }

    /// Fold training batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let i = self.store.index_of(&format!("{prefix}.{suffix}")).expect("bn buffer");
                for (r, b) in self.store.tensor_mut(i).data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
        }
    }

    /// Evaluation-mode logits for a batch of local maps.
    pub fn logits(&self, feats: &Tensor, phi: Option<&Tensor>) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let f = self.forward(&mut t, feats, phi, Mode::Eval, false)?;
        Ok(t.value(f.logits).data().to_vec())
    }

    /// Evaluation-mode logit of one image.
    pub fn logit(&self, img: &ImageU8, id: &str, file: Option<&EmbeddingFile>) -> Result<f64> {
        let feats = self.local_features(&to_tensor(img))?;
        let phi = self.embedding(img, id, file)?;
        let phi = phi.map(|p| p.reshape(vec![1, self.config.embed_dim])).transpose()?;
        Ok(self.logits(&feats, phi.as_ref())?[0])
    }
}
