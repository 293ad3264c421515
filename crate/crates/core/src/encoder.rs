//! A small layered transformer that jointly embeds instruction text, a
//! reference image and a source video, exposing every hidden state and the
//! per-head query/key projections.

use std::collections::HashMap;
use std::path::Path;

use mive_autograd::{rms_normalize, softmax_rows, Matrix, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MiveError, Result};
use crate::nn::{gelu, linear_eval, sinusoid, sinusoid_3d};
use crate::tensor::Video;

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab.txt");
const NORM_EPS: f64 = 1e-6;

pub const UNK_ID: u32 = 0;

/// Newline-delimited token list; the line number is the id and line 0 is UNK.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn parse(text: &str) -> Self {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate().skip(1) {
            if !w.is_empty() {
                index.entry(w.clone()).or_insert(i as u32);
            }
        }
        Self { words, index }
    }

    /// The vocabulary shipped in `assets/vocab.txt`.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_VOCAB)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MiveError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.words.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercase whitespace tokenization; unknown words map to [`UNK_ID`].
    pub fn tokenize(&self, text: &str) -> TokenIds {
        TokenIds(
            text.split_whitespace()
                .map(|w| self.id(&w.to_lowercase()))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenIds(pub Vec<u32>);

impl TokenIds {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which hidden state serves as the early-layer feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstFeature {
    /// `hidden[0]`, the input embeddings.
    Embedding,
    /// `hidden[1]`, the output of the first block.
    #[default]
    AfterFirstBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub pos_scale: f64,
    pub seed: u64,
    pub first_feature: FirstFeature,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 128,
            heads: 4,
            patch: 8,
            mlp_ratio: 4,
            init_std: 0.02,
            pos_scale: 0.1,
            seed: 0,
            first_feature: FirstFeature::AfterFirstBlock,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.patch == 0 || self.dim % self.heads != 0 {
            return Err(MiveError::invalid(format!(
                "encoder needs layers, heads, patch > 0 and dim divisible by heads (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Joint token sequence: text tokens first, then visual patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedContext {
    pub embeddings: Matrix,
    pub num_text: usize,
    pub num_visual: usize,
    /// Visual token grid `(frames, rows, cols)`; frame 0 is the reference.
    pub visual_grid: (usize, usize, usize),
}

impl UnifiedContext {
    pub fn len(&self) -> usize {
        self.num_text + self.num_visual
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_indices(&self) -> std::ops::Range<usize> {
        0..self.num_text
    }

    pub fn visual_indices(&self) -> std::ops::Range<usize> {
        self.num_text..self.len()
    }
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    /// `L + 1` matrices; index 0 holds the input embeddings.
    pub hidden: Vec<Matrix>,
    /// `queries[l - 1][h]` is the normalized query of head `h` in block `l`.
    pub queries: Vec<Vec<Matrix>>,
    pub keys: Vec<Vec<Matrix>>,
    /// `hidden[L]` after the final RMS norm.
    pub final_hidden: Matrix,
}

impl EncoderTrace {
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    /// `hidden[l]` for `0 <= l <= L`.
    pub fn layer(&self, l: usize) -> Result<&Matrix> {
        self.hidden.get(l).ok_or_else(|| {
            MiveError::invalid(format!("layer {l} outside 0..={}", self.num_layers()))
        })
    }
}

/// Frozen encoder with seeded weights.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: EncoderConfig,
    params: ParamStore,
    vocab_size: usize,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let std = config.init_std;
        let mut params = ParamStore::new();
        params.insert("tok_emb", Matrix::randn(vocab_size.max(1), d, std, &mut rng));
        let patch_dim = 3 * config.patch * config.patch;
        crate::nn::init_linear(&mut params, "patch", patch_dim, d, std, true, &mut rng);
        for l in 0..config.layers {
            for name in ["wq", "wk", "wv", "wo"] {
                params.insert(format!("blocks.{l}.{name}"), Matrix::randn(d, d, std, &mut rng));
            }
            let hidden = d * config.mlp_ratio;
            crate::nn::init_linear(&mut params, &format!("blocks.{l}.fc1"), d, hidden, std, true, &mut rng);
            crate::nn::init_linear(&mut params, &format!("blocks.{l}.fc2"), hidden, d, std, true, &mut rng);
        }
        Ok(Self {
            config,
            params,
            vocab_size: vocab_size.max(1),
        })
    }

    pub fn with_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let vocab_size = params
            .get("tok_emb")
            .ok_or_else(|| MiveError::format("encoder weights lack tok_emb"))?
            .rows();
        Ok(Self {
            config,
            params,
            vocab_size,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn embed_text(&self, tokens: &TokenIds) -> Result<Matrix> {
        let d = self.config.dim;
        let table = self.params.get("tok_emb").expect("tok_emb");
        let mut out = Matrix::zeros(tokens.len(), d);
        for (i, &id) in tokens.0.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(MiveError::invalid(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab_size
                )));
            }
            let pos = sinusoid(i as f64, d);
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = table.get(id as usize, k) + self.config.pos_scale * pos[k];
            }
        }
        Ok(out)
    }

    /// Raw pixel patches of every frame, temporal-major then row-major; each
    /// patch is flattened in `(colour, dy, dx)` order.
    fn patches(&self, frames: &[&Video]) -> Result<(Matrix, (usize, usize, usize))> {
        let p = self.config.patch;
        let (h, w) = (frames[0].height(), frames[0].width());
        for v in frames {
            if v.height() != h || v.width() != w {
                return Err(MiveError::shape(format!(
                    "visual inputs disagree in size: {}x{} vs {h}x{w}",
                    v.height(),
                    v.width()
                )));
            }
        }
        if h % p != 0 || w % p != 0 {
            return Err(MiveError::shape(format!(
                "spatial size {h}x{w} not divisible by encoder patch {p}"
            )));
        }
        let (rows, cols) = (h / p, w / p);
        let total: usize = frames.iter().map(|v| v.frames()).sum();
        let mut out = Matrix::zeros(total * rows * cols, 3 * p * p);
        let mut r = 0;
        for v in frames {
            let data = v.data();
            for f in 0..v.frames() {
                for py in 0..rows {
                    for px in 0..cols {
                        let row = out.row_mut(r);
                        let mut k = 0;
                        for c in 0..3 {
                            for dy in 0..p {
                                for dx in 0..p {
                                    row[k] = data[[f, c, py * p + dy, px * p + dx]];
                                    k += 1;
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        Ok((out, (total, rows, cols)))
    }

    fn embed_visual(&self, frames: &[&Video]) -> Result<(Matrix, (usize, usize, usize))> {
        let (patches, grid) = self.patches(frames)?;
        let mut emb = linear_eval(&self.params, "patch", &patches)?;
        let (_, rows, cols) = grid;
        let d = self.config.dim;
        for i in 0..emb.rows() {
            let (f, rem) = (i / (rows * cols), i % (rows * cols));
            let pos = sinusoid_3d(f, rem / cols, rem % cols, d);
            for (o, p) in emb.row_mut(i).iter_mut().zip(pos) {
                *o += self.config.pos_scale * p;
            }
        }
        Ok((emb, grid))
    }

    fn run(&self, x0: Matrix) -> Result<EncoderTrace> {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut hidden = vec![x0];
        let mut queries = Vec::with_capacity(cfg.layers);
        let mut keys = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let x = hidden.last().expect("nonempty");
            let p = |n: &str| self.params.get(&format!("blocks.{l}.{n}")).expect("block weight");
            let xn = rms_normalize(x, NORM_EPS).0;
            let q = xn.matmul(p("wq"))?;
            let k = xn.matmul(p("wk"))?;
            let v = xn.matmul(p("wv"))?;
            let mut qs = Vec::with_capacity(cfg.heads);
            let mut ks = Vec::with_capacity(cfg.heads);
            let mut outs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = rms_normalize(&q.slice_cols(h * hd, hd), NORM_EPS).0;
                let kh = rms_normalize(&k.slice_cols(h * hd, hd), NORM_EPS).0;
                let mut logits = qh.matmul_t(&kh)?;
                logits.scale_in_place(scale);
                outs.push(softmax_rows(&logits).matmul(&v.slice_cols(h * hd, hd))?);
                qs.push(qh);
                ks.push(kh);
            }
            let refs: Vec<&Matrix> = outs.iter().collect();
            let mut y = x.clone();
            y.add_assign(&Matrix::concat_cols(&refs)?.matmul(p("wo"))?);
            let yn = rms_normalize(&y, NORM_EPS).0;
            let act = linear_eval(&self.params, &format!("blocks.{l}.fc1"), &yn)?.map(gelu);
            y.add_assign(&linear_eval(&self.params, &format!("blocks.{l}.fc2"), &act)?);
            if !y.is_finite() {
                return Err(MiveError::Numeric(format!("non-finite activation in encoder block {}", l + 1)));
            }
            hidden.push(y);
            queries.push(qs);
            keys.push(ks);
        }
        let final_hidden = rms_normalize(hidden.last().expect("nonempty"), NORM_EPS).0;
        Ok(EncoderTrace {
            hidden,
            queries,
            keys,
            final_hidden,
        })
    }

    /// Jointly encodes `[text; ref patches; video patches]`.
    pub fn encode_unified(
        &self,
        tokens: &TokenIds,
        ref_image: &Video,
        src_video: &Video,
    ) -> Result<(UnifiedContext, EncoderTrace)> {
        if ref_image.frames() != 1 {
            return Err(MiveError::shape(format!(
                "reference image must have one frame, got {}",
                ref_image.frames()
            )));
        }
        let text = self.embed_text(tokens)?;
        let (visual, grid) = self.embed_visual(&[ref_image, src_video])?;
        let embeddings = Matrix::concat_rows(&[&text, &visual])?;
        let ctx = UnifiedContext {
            embeddings: embeddings.clone(),
            num_text: text.rows(),
            num_visual: visual.rows(),
            visual_grid: grid,
        };
        let trace = self.run(embeddings)?;
        Ok((ctx, trace))
    }

    pub fn trace_text(&self, tokens: &TokenIds) -> Result<EncoderTrace> {
        self.run(self.embed_text(tokens)?)
    }

    pub fn trace_image(&self, image: &Video) -> Result<EncoderTrace> {
        self.run(self.embed_visual(&[image])?.0)
    }

    /// Final-layer features of a text-only pass.
    pub fn encode_text(&self, tokens: &TokenIds) -> Result<Matrix> {
        Ok(self.trace_text(tokens)?.final_hidden)
    }

    /// Final-layer features of an image-only pass.
    pub fn encode_image(&self, image: &Video) -> Result<Matrix> {
        Ok(self.trace_image(image)?.final_hidden)
    }

    /// The hidden state used as the early-layer feature.
    pub fn first_feature<'t>(&self, trace: &'t EncoderTrace) -> &'t Matrix {
        match self.config.first_feature {
            FirstFeature::Embedding => &trace.hidden[0],
            FirstFeature::AfterFirstBlock => &trace.hidden[1],
        }
    }
}

/// Separate text and image encoders, independent of the unified one.
#[derive(Debug, Clone)]
pub struct DecoupledEncoders {
    pub text: ToyEncoder,
    pub image: ToyEncoder,
}

impl DecoupledEncoders {
    pub fn new(config: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        let mut text_cfg = config.clone();
        text_cfg.seed = config.seed.wrapping_add(1);
        let mut image_cfg = config.clone();
        image_cfg.seed = config.seed.wrapping_add(2);
        Ok(Self {
            text: ToyEncoder::new(text_cfg, vocab_size)?,
            image: ToyEncoder::new(image_cfg, vocab_size)?,
        })
    }

    pub fn encode_text_only(&self, tokens: &TokenIds) -> Result<Matrix> {
        self.text.encode_text(tokens)
    }

    pub fn encode_image_only(&self, image: &Video) -> Result<Matrix> {
        self.image.encode_image(image)
    }
}
