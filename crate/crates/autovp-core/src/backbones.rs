//! Frozen source classifiers.
//!
//! Two shapes of model sit behind [`Backbone`]: single-encoder vision
//! classifiers emitting `K_s` source logits, and dual image/text encoders
//! scoring images against text-encoded class names by cosine similarity.
//! Weights are immutable after construction and every forward pass is
//! deterministic and differentiable with respect to the input image.
//!
//! The named registry entries (`resnet18`, `resnext101_ig`, `swin_t`,
//! `clip`) carry the published input geometry and normalization constants
//! and load their parameters from a configured local weight file in the
//! documented linear-map format. Tests use the seeded toy constructors,
//! which need no files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, TensorId};
use crate::error::{Error, Result};

/// Default temperature applied to cosine similarities in dual encoders.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

/// Default text template; `{}` is replaced by the class name.
pub const DEFAULT_TEMPLATE: &str = "This is a photo of a {}";

/// Per-channel input normalization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity normalization (used by the toy backbones).
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn clip() -> Self {
        Self {
            mean: vec![0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: vec![0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

fn hash_f64s(hasher: &mut Sha256, values: impl Iterator<Item = f64>) {
    for v in values {
        hasher.update(v.to_le_bytes());
    }
}

fn fingerprint_from(hasher: Sha256) -> u64 {
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn check_input_shape(batch: &Array4<f64>, input: (usize, usize, usize), name: &str) -> Result<()> {
    let shape = batch.shape();
    if (shape[1], shape[2], shape[3]) != input {
        return Err(Error::ShapeMismatch {
            context: format!("{name} forward"),
            expected: format!("N x {} x {} x {}", input.0, input.1, input.2),
            got: format!("{} x {} x {} x {}", shape[0], shape[1], shape[2], shape[3]),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Vision backbones
// ---------------------------------------------------------------------------

/// A frozen single-encoder classifier: normalization followed by a linear
/// map from the flattened image to `K_s` source logits.
#[derive(Debug, Clone)]
pub struct VisionBackbone {
    name: String,
    input: (usize, usize, usize),
    weight: Array2<f64>, // K_s × D
    bias: Array1<f64>,   // K_s
    norm: NormStats,
    source_class_names: Option<Vec<String>>,
}

impl VisionBackbone {
    /// Deterministic toy backbone: weights `U(-1/√D, 1/√D)` and bias
    /// `U(-0.5, 0.5)` drawn from a ChaCha stream seeded with `seed`, weights
    /// first, row-major. Normalization is the identity, so example values
    /// are plain affine images of the input.
    pub fn toy(seed: u64, input: (usize, usize, usize), k_s: usize) -> Self {
        let d = input.0 * input.1 * input.2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (d as f64).sqrt();
        let weight = Array2::from_shape_fn((k_s, d), |_| rng.gen_range(-a..a));
        let bias = Array1::from_shape_fn(k_s, |_| rng.gen_range(-0.5..0.5));
        Self {
            name: format!("toy-vision-{seed}"),
            input,
            weight,
            bias,
            norm: NormStats::identity(input.0),
            source_class_names: Some((0..k_s).map(|i| format!("source_{i}")).collect()),
        }
    }

    pub fn from_parts(
        name: impl Into<String>,
        input: (usize, usize, usize),
        weight: Array2<f64>,
        bias: Array1<f64>,
        norm: NormStats,
        source_class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let d = input.0 * input.1 * input.2;
        if weight.ncols() != d || weight.nrows() != bias.len() {
            return Err(Error::ShapeMismatch {
                context: "vision backbone weights".into(),
                expected: format!("K_s x {d} weight with matching bias"),
                got: format!("{} x {} weight, {} bias", weight.nrows(), weight.ncols(), bias.len()),
            });
        }
        Ok(Self {
            name: name.into(),
            input,
            weight,
            bias,
            norm,
            source_class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn k_s(&self) -> usize {
        self.weight.nrows()
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn source_class_names(&self) -> Option<&[String]> {
        self.source_class_names.as_deref()
    }

    /// Source logits for a prompted batch (values in [0,1]; normalization
    /// is applied internally).
    pub fn classify(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        check_input_shape(batch, self.input, &self.name)?;
        let mut tape = Tape::new();
        let id = tape.leaf(batch.clone().into_dyn());
        let out = self.logits_on_tape(&mut tape, id);
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("logits rank"))
    }

    /// Tape version used during training; the weight and bias enter as
    /// constants, so no gradient ever reaches them.
    pub fn logits_on_tape(&self, tape: &mut Tape, batch: TensorId) -> TensorId {
        let normed = tape.normalize_channels(batch, &self.norm.mean, &self.norm.std);
        let flat = tape.flatten_batch(normed);
        let w = tape.leaf(self.weight.clone().into_dyn());
        let b = tape.leaf(self.bias.clone().into_dyn());
        tape.linear(flat, w, b)
    }

    /// Hash of every weight byte; equality across a training run certifies
    /// the backbone stayed frozen.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        hash_f64s(&mut h, self.weight.iter().copied());
        hash_f64s(&mut h, self.bias.iter().copied());
        hash_f64s(&mut h, self.norm.mean.iter().copied());
        hash_f64s(&mut h, self.norm.std.iter().copied());
        fingerprint_from(h)
    }
}

// ---------------------------------------------------------------------------
// Text encoders and dual encoders
// ---------------------------------------------------------------------------

/// Class-name text to embedding. Encoders are frozen and deterministic.
pub trait TextEncoder: Send + Sync {
    fn encode(&self, text: &str) -> Result<Array1<f64>>;
    fn dim(&self) -> usize;
}

/// Toy text encoder: the token sequence is hashed (SHA-256, stable across
/// platforms) into a ChaCha seed that draws a unit-normalized embedding.
/// Identical strings always embed identically.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    seed: u64,
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl TextEncoder for HashTextEncoder {
    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Tokenizer {
                name: text.to_string(),
                reason: "empty token sequence".into(),
            });
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest = h.finalize();
        let token_seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed);
        let mut v = Array1::from_shape_fn(self.dim, |_| rng.gen::<f64>() * 2.0 - 1.0);
        let n = v.dot(&v).sqrt().max(1e-12);
        v.mapv_inplace(|x| x / n);
        Ok(v)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Lookup-table text encoder backed by precomputed embeddings; names not
/// present in the table fail to tokenize.
#[derive(Debug, Clone)]
pub struct DictTextEncoder {
    table: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

impl DictTextEncoder {
    pub fn new(table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or(Error::EmptyClassList)?;
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::Config(
                "text embedding table has inconsistent dimensions".into(),
            ));
        }
        Ok(Self { table, dim })
    }
}

impl TextEncoder for DictTextEncoder {
    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        self.table
            .get(text)
            .map(|v| Array1::from_vec(v.clone()))
            .ok_or_else(|| Error::Tokenizer {
                name: text.to_string(),
                reason: "not present in the embedding table".into(),
            })
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// A frozen dual image/text encoder with CLIP-style cosine prediction.
///
/// Logit columns are laid out template-major: block `t` holds the scores of
/// template `t` applied to every class, so column `t*K_t + k` scores class
/// `k` under template `t`.
pub struct DualEncoder {
    name: String,
    input: (usize, usize, usize),
    image_proj: Array2<f64>, // E × D
    norm: NormStats,
    text: Box<dyn TextEncoder>,
    templates: Vec<String>,
    logit_scale: f64,
}

impl DualEncoder {
    /// Deterministic toy dual encoder; the image encoder is a seeded linear
    /// projection and the text side is a [`HashTextEncoder`] with the same
    /// seed. Embeddings of both sides share `embed_dim`.
    pub fn toy(
        seed: u64,
        input: (usize, usize, usize),
        embed_dim: usize,
        templates: Vec<String>,
        logit_scale: f64,
    ) -> Self {
        let d = input.0 * input.1 * input.2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1A1);
        let a = 1.0 / (d as f64).sqrt();
        let image_proj = Array2::from_shape_fn((embed_dim, d), |_| rng.gen_range(-a..a));
        let templates = if templates.is_empty() {
            vec![DEFAULT_TEMPLATE.to_string()]
        } else {
            templates
        };
        Self {
            name: format!("toy-dual-{seed}"),
            input,
            image_proj,
            norm: NormStats::identity(input.0),
            text: Box::new(HashTextEncoder::new(seed, embed_dim)),
            templates,
            logit_scale,
        }
    }

    pub fn from_parts(
        name: impl Into<String>,
        input: (usize, usize, usize),
        image_proj: Array2<f64>,
        norm: NormStats,
        text: Box<dyn TextEncoder>,
        templates: Vec<String>,
        logit_scale: f64,
    ) -> Result<Self> {
        if image_proj.nrows() != text.dim() {
            return Err(Error::ShapeMismatch {
                context: "dual encoder embeddings".into(),
                expected: format!("image embedding dim {}", text.dim()),
                got: format!("{}", image_proj.nrows()),
            });
        }
        if templates.is_empty() {
            return Err(Error::Config("dual encoder needs at least one template".into()));
        }
        Ok(Self {
            name: name.into(),
            input,
            image_proj,
            norm,
            text,
            templates,
            logit_scale,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.text.as_ref()
    }

    fn apply_template(template: &str, class_name: &str) -> String {
        if template.contains("{}") {
            template.replace("{}", class_name)
        } else {
            format!("{template} {class_name}")
        }
    }

    /// Unit-normalized text embedding matrix, E × (K_t·T), template-major.
    pub fn text_matrix(&self, class_names: &[String]) -> Result<Array2<f64>> {
        if class_names.is_empty() {
            return Err(Error::EmptyClassList);
        }
        let e = self.text.dim();
        let cols = class_names.len() * self.templates.len();
        let mut m = Array2::<f64>::zeros((e, cols));
        for (t, template) in self.templates.iter().enumerate() {
            for (k, name) in class_names.iter().enumerate() {
                let mut emb = self.text.encode(&Self::apply_template(template, name))?;
                let n = emb.dot(&emb).sqrt().max(1e-12);
                emb.mapv_inplace(|x| x / n);
                m.column_mut(t * class_names.len() + k).assign(&emb);
            }
        }
        Ok(m)
    }

    /// Cosine logits against every (template, class) pair, scaled by
    /// `logit_scale`; output is N × (K_t·T), template-major.
    pub fn clip_logits(&self, batch: &Array4<f64>, class_names: &[String]) -> Result<Array2<f64>> {
        check_input_shape(batch, self.input, &self.name)?;
        let text = self.text_matrix(class_names)?;
        let mut tape = Tape::new();
        let id = tape.leaf(batch.clone().into_dyn());
        let out = self.logits_on_tape(&mut tape, id, &text);
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("logits rank"))
    }

    /// Tape version of [`Self::clip_logits`] given a prebuilt text matrix.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: TensorId,
        text_matrix: &Array2<f64>,
    ) -> TensorId {
        let normed = tape.normalize_channels(batch, &self.norm.mean, &self.norm.std);
        let flat = tape.flatten_batch(normed);
        let proj = tape.leaf(self.image_proj.t().to_owned().into_dyn()); // D × E
        let emb = tape.matmul(flat, proj);
        let unit = tape.l2_normalize_rows(emb);
        let text = tape.leaf(text_matrix.clone().into_dyn());
        let cos = tape.matmul(unit, text);
        tape.scale_const(cos, self.logit_scale)
    }

    /// Zero-shot class prediction: argmax over the template-0 block, ties
    /// broken toward the lowest class index.
    pub fn zero_shot_predict(
        &self,
        batch: &Array4<f64>,
        class_names: &[String],
    ) -> Result<Vec<usize>> {
        let logits = self.clip_logits(batch, class_names)?;
        let k_t = class_names.len();
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| argmax(&row.as_slice().expect("contiguous row")[..k_t]))
            .collect())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        hash_f64s(&mut h, self.image_proj.iter().copied());
        hash_f64s(&mut h, self.norm.mean.iter().copied());
        hash_f64s(&mut h, self.norm.std.iter().copied());
        for t in &self.templates {
            h.update(t.as_bytes());
        }
        hash_f64s(&mut h, std::iter::once(self.logit_scale));
        fingerprint_from(h)
    }
}

impl std::fmt::Debug for DualEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualEncoder")
            .field("name", &self.name)
            .field("input", &self.input)
            .field("templates", &self.templates.len())
            .field("logit_scale", &self.logit_scale)
            .finish()
    }
}

/// First index of the maximal value (ties go to the lower index).
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Unified backbone
// ---------------------------------------------------------------------------

/// Either kind of frozen source model.
#[derive(Debug)]
pub enum Backbone {
    Vision(VisionBackbone),
    Dual(DualEncoder),
}

impl Backbone {
    pub fn name(&self) -> &str {
        match self {
            Backbone::Vision(v) => v.name(),
            Backbone::Dual(d) => d.name(),
        }
    }

    pub fn input(&self) -> (usize, usize, usize) {
        match self {
            Backbone::Vision(v) => v.input(),
            Backbone::Dual(d) => d.input(),
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Backbone::Dual(_))
    }

    /// Width of the source logit space the mapping stage sees: `K_s` for a
    /// vision model, `K_t·T` for a dual encoder.
    pub fn source_width(&self, k_t: usize) -> usize {
        match self {
            Backbone::Vision(v) => v.k_s(),
            Backbone::Dual(d) => k_t * d.num_templates(),
        }
    }

    /// Source logits of a prompted batch (pure forward).
    pub fn source_logits(&self, batch: &Array4<f64>, class_names: &[String]) -> Result<Array2<f64>> {
        match self {
            Backbone::Vision(v) => v.classify(batch),
            Backbone::Dual(d) => d.clip_logits(batch, class_names),
        }
    }

    /// Source logits on a tape. Dual encoders precompute their text matrix
    /// once per call; pass `text_matrix` to reuse one across batches.
    pub fn source_logits_on_tape(
        &self,
        tape: &mut Tape,
        batch: TensorId,
        text_matrix: Option<&Array2<f64>>,
        class_names: &[String],
    ) -> Result<TensorId> {
        match self {
            Backbone::Vision(v) => Ok(v.logits_on_tape(tape, batch)),
            Backbone::Dual(d) => {
                let owned;
                let text = match text_matrix {
                    Some(t) => t,
                    None => {
                        owned = d.text_matrix(class_names)?;
                        &owned
                    }
                };
                Ok(d.logits_on_tape(tape, batch, text))
            }
        }
    }

    pub fn fingerprint(&self) -> u64 {
        match self {
            Backbone::Vision(v) => v.fingerprint(),
            Backbone::Dual(d) => d.fingerprint(),
        }
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// Which interface a registry entry builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Vision,
    Dual,
}

/// Declared metadata for a named backbone. Real entries resolve their
/// weight file under the configured weight root at build time.
#[derive(Debug, Clone)]
pub struct BackboneDescriptor {
    pub name: String,
    pub kind: BackboneKind,
    pub input: (usize, usize, usize),
    /// Source class count for vision entries.
    pub k_s: Option<usize>,
    pub norm: NormStats,
    /// Relative weight file name under the weight root.
    pub weight_file: Option<String>,
    pub templates: Vec<String>,
    pub logit_scale: f64,
}

/// The four standard pre-trained entries: three ImageNet-class vision
/// models and one dual encoder. All take 224×224 RGB input.
pub fn paper_backbones() -> Vec<BackboneDescriptor> {
    let vision = |name: &str| BackboneDescriptor {
        name: name.to_string(),
        kind: BackboneKind::Vision,
        input: (3, 224, 224),
        k_s: Some(1000),
        norm: NormStats::imagenet(),
        weight_file: Some(format!("{name}.weights.json")),
        templates: Vec::new(),
        logit_scale: DEFAULT_LOGIT_SCALE,
    };
    vec![
        vision("resnet18"),
        vision("resnext101_ig"),
        vision("swin_t"),
        BackboneDescriptor {
            name: "clip".to_string(),
            kind: BackboneKind::Dual,
            input: (3, 224, 224),
            k_s: None,
            norm: NormStats::clip(),
            weight_file: Some("clip.weights.json".to_string()),
            templates: vec![DEFAULT_TEMPLATE.to_string()],
            logit_scale: DEFAULT_LOGIT_SCALE,
        },
    ]
}

/// Serialized weight container for registry backbones.
///
/// Vision entries carry a `K_s × D` logit map; dual entries carry an
/// `E × D` image projection plus a table of precomputed text embeddings
/// keyed by the exact template-expanded strings.
#[derive(Debug, Serialize, Deserialize)]
pub struct WeightFile {
    pub schema: String,
    pub input: [usize; 3],
    #[serde(default)]
    pub weight: Vec<f64>,
    #[serde(default)]
    pub bias: Vec<f64>,
    #[serde(default)]
    pub rows: usize,
    #[serde(default)]
    pub source_class_names: Option<Vec<String>>,
    #[serde(default)]
    pub text_embeddings: Option<BTreeMap<String, Vec<f64>>>,
}

pub const WEIGHT_FILE_SCHEMA: &str = "autovp-backbone-weights-v1";

/// Build a backbone from its descriptor, resolving the weight file under
/// `weight_root`. Missing files surface as [`Error::WeightsUnavailable`].
pub fn build_from_descriptor(
    desc: &BackboneDescriptor,
    weight_root: Option<&Path>,
) -> Result<Backbone> {
    let file = desc.weight_file.as_ref().ok_or_else(|| {
        Error::Config(format!("backbone {} declares no weight file", desc.name))
    })?;
    let root = weight_root.ok_or_else(|| {
        Error::WeightsUnavailable(format!(
            "no weight root configured for backbone {} (expected file {file})",
            desc.name
        ))
    })?;
    let path = root.join(file);
    if !path.exists() {
        return Err(Error::WeightsUnavailable(format!("{}", path.display())));
    }
    let text = std::fs::read_to_string(&path)?;
    let parsed: WeightFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if parsed.schema != WEIGHT_FILE_SCHEMA {
        return Err(Error::Config(format!(
            "{}: unknown schema {:?}",
            path.display(),
            parsed.schema
        )));
    }
    let d = desc.input.0 * desc.input.1 * desc.input.2;
    let rows = parsed.rows;
    if rows == 0 || parsed.weight.len() != rows * d {
        return Err(Error::Config(format!(
            "{}: weight length {} does not factor as rows x {d}",
            path.display(),
            parsed.weight.len()
        )));
    }
    let weight = Array2::from_shape_vec((rows, d), parsed.weight.clone()).expect("checked above");
    match desc.kind {
        BackboneKind::Vision => {
            if parsed.bias.len() != rows {
                return Err(Error::Config(format!(
                    "{}: bias length {} != {rows}",
                    path.display(),
                    parsed.bias.len()
                )));
            }
            Ok(Backbone::Vision(VisionBackbone::from_parts(
                desc.name.clone(),
                desc.input,
                weight,
                Array1::from_vec(parsed.bias.clone()),
                desc.norm.clone(),
                parsed.source_class_names.clone(),
            )?))
        }
        BackboneKind::Dual => {
            let table = parsed.text_embeddings.clone().ok_or_else(|| {
                Error::Config(format!("{}: dual entry without text embeddings", path.display()))
            })?;
            let text = DictTextEncoder::new(table)?;
            Ok(Backbone::Dual(DualEncoder::from_parts(
                desc.name.clone(),
                desc.input,
                weight,
                desc.norm.clone(),
                Box::new(text),
                desc.templates.clone(),
                desc.logit_scale,
            )?))
        }
    }
}
