//! Differentiable model components.
//!
//! Every block uses the post-norm residual layout `LN(sublayer(x) + x)`.
//! The model is split into an image encoder (patch tokens with a prepended
//! `[CLS]`), a report encoder of the same shape over token embeddings, the
//! relational graph encoder whose self-attention is masked by the graph
//! adjacency, a graph-attention block where visual queries read graph nodes,
//! a two-layer report decoder and a multimodal matching encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{adjacency_to_mask, KnowledgeGraph};
use crate::image::GrayImage;
use crate::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use crate::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub image_layers: usize,
    pub report_layers: usize,
    pub graph_layers: usize,
    pub decoder_layers: usize,
    pub multimodal_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Image views per sample; tokens of extra views are concatenated.
    #[serde(default = "one")]
    pub views: usize,
    /// Longest text sequence, special tokens included.
    pub max_text_len: usize,
    /// Width of the contrastive projections.
    pub proj_dim: usize,
    pub tau_init: f64,
    pub init_std: f64,
    /// When false, graph attention is skipped and the decoder reads the plain
    /// visual features.
    #[serde(default = "yes")]
    pub use_graph: bool,
    /// Filled from the vocabulary at setup time.
    #[serde(default)]
    pub vocab_size: usize,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            image_layers: 2,
            report_layers: 2,
            graph_layers: 2,
            decoder_layers: 2,
            multimodal_layers: 1,
            image_size: 32,
            patch_size: 8,
            views: 1,
            max_text_len: 64,
            proj_dim: 64,
            tau_init: 0.07,
            init_std: 0.08,
            use_graph: true,
            vocab_size: 0,
        }
    }

    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 768,
            heads: 12,
            ffn_dim: 3072,
            image_layers: 2,
            report_layers: 2,
            graph_layers: 2,
            decoder_layers: 2,
            multimodal_layers: 1,
            image_size: 224,
            patch_size: 16,
            views: 1,
            max_text_len: 128,
            proj_dim: 768,
            tau_init: 0.07,
            init_std: 0.02,
            use_graph: true,
            vocab_size: 0,
        }
    }

    /// d=8, 2 heads: the configuration used for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            image_layers: 1,
            report_layers: 1,
            graph_layers: 1,
            decoder_layers: 2,
            multimodal_layers: 1,
            image_size: 8,
            patch_size: 4,
            views: 1,
            max_text_len: 12,
            proj_dim: 8,
            tau_init: 0.07,
            init_std: 0.3,
            use_graph: true,
            vocab_size: 12,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        let counts = [
            self.ffn_dim,
            self.decoder_layers,
            self.views,
            self.max_text_len,
            self.proj_dim,
        ];
        if counts.contains(&0) {
            return bad("ffn_dim, decoder_layers, views, max_text_len and proj_dim must be positive");
        }
        if !(self.tau_init > 0.0 && self.init_std > 0.0) {
            return bad("tau_init and init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
        std: f64,
        bias: bool,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), inp, out, std, rng);
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros(1, out), false));
        Linear { w, b }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.w);
        let y = t.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            g: store.add(format!("{name}.g"), Mat::filled(1, d, 1.0), false),
            b: store.add(format!("{name}.b"), Mat::zeros(1, d), false),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (g, b) = (t.param(self.g), t.param(self.b));
        t.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let (d, s) = (cfg.d_model, cfg.init_std);
        Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, s, true),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, s, true),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, s, true),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, s, true),
            heads: cfg.heads,
        }
    }

    pub fn value_proj(&self) -> &Linear {
        &self.v
    }

    /// Queries from `x`, keys and values from `memory`.
    pub fn forward(&self, t: &mut Tape, x: Var, memory: Var, mask: Option<&AttentionMask>) -> Var {
        let q = self.q.forward(t, x);
        let k = self.k.forward(t, memory);
        let v = self.v.forward(t, memory);
        let a = t.attention(q, k, v, self.heads, mask);
        self.o.forward(t, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let s = cfg.init_std;
        FeedForward {
            up: Linear::new(
                store,
                rng,
                &format!("{name}.up"),
                cfg.d_model,
                cfg.ffn_dim,
                s,
                true,
            ),
            down: Linear::new(
                store,
                rng,
                &format!("{name}.down"),
                cfg.ffn_dim,
                cfg.d_model,
                s,
                true,
            ),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(t, x);
        let h = t.gelu(h);
        self.down.forward(t, h)
    }
}

/// `e = LN(MHA(x) + x)`, `out = LN(FFN(e) + e)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        EncoderLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), cfg),
            norm1: Norm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg),
            norm2: Norm::new(store, &format!("{name}.ln2"), cfg.d_model),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<&AttentionMask>) -> Var {
        let a = self.attn.forward(t, x, x, mask);
        let e = t.add(a, x);
        let e = self.norm1.forward(t, e);
        let f = self.ffn.forward(t, e);
        let o = t.add(f, e);
        self.norm2.forward(t, o)
    }
}

/// `e = LN(CA(x, memory) + x)`, `out = LN(FFN(e) + e)`.
#[derive(Clone, Debug)]
pub struct CrossLayer {
    attn: Attention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

impl CrossLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        CrossLayer {
            attn: Attention::new(store, rng, &format!("{name}.attn"), cfg),
            norm1: Norm::new(store, &format!("{name}.ln1"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg),
            norm2: Norm::new(store, &format!("{name}.ln2"), cfg.d_model),
        }
    }

    pub fn attention(&self) -> &Attention {
        &self.attn
    }

    pub fn forward(&self, t: &mut Tape, x: Var, memory: Var, mask: Option<&AttentionMask>) -> Var {
        let a = self.attn.forward(t, x, memory, mask);
        let e = t.add(a, x);
        let e = self.norm1.forward(t, e);
        let f = self.ffn.forward(t, e);
        let o = t.add(f, e);
        self.norm2.forward(t, o)
    }
}

/// Self-attention, cross-attention over a memory, then FFN; each sublayer
/// followed by residual and LN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross: Attention,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        DecoderLayer {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), cfg),
            norm1: Norm::new(store, &format!("{name}.ln1"), cfg.d_model),
            cross: Attention::new(store, rng, &format!("{name}.cross"), cfg),
            norm2: Norm::new(store, &format!("{name}.ln2"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), cfg),
            norm3: Norm::new(store, &format!("{name}.ln3"), cfg.d_model),
        }
    }

    pub fn forward(&self, t: &mut Tape, y: Var, self_mask: Option<&AttentionMask>, memory: Var) -> Var {
        let a = self.self_attn.forward(t, y, y, self_mask);
        let e = t.add(a, y);
        let e = self.norm1.forward(t, e);
        let c = self.cross.forward(t, e, memory, None);
        let c = t.add(c, e);
        let c = self.norm2.forward(t, c);
        let f = self.ffn.forward(t, c);
        let o = t.add(f, c);
        self.norm3.forward(t, o)
    }
}

/// Parameter layout of the whole model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ReportModel {
    config: ModelConfig,
    patch: Linear,
    image_cls: ParamId,
    image_pos: ParamId,
    image_layers: Vec<EncoderLayer>,
    text_tok: ParamId,
    text_pos: ParamId,
    report_layers: Vec<EncoderLayer>,
    graph_layers: Vec<EncoderLayer>,
    graph_attn: CrossLayer,
    dec_tok: ParamId,
    dec_pos: ParamId,
    dec_layers: Vec<DecoderLayer>,
    dec_out: Linear,
    mm_layers: Vec<DecoderLayer>,
    itm_head: Linear,
    w_image: ParamId,
    w_report: ParamId,
    log_tau: ParamId,
}

/// Parameter name prefixes that have momentum copies.
pub const MOMENTUM_PREFIXES: [&str; 3] = ["image.", "report.", "proj."];

impl ReportModel {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if config.vocab_size <= vocab::UNK {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new();
        let (d, s) = (cfg.d_model, cfg.init_std);
        let p2 = cfg.patch_size * cfg.patch_size;
        let image_rows = 1 + cfg.views * cfg.num_patches();

        let patch = Linear::new(&mut st, &mut rng, "image.patch", p2, d, s, true);
        let image_cls = st.add_normal("image.cls", 1, d, s, &mut rng);
        let image_pos = st.add_normal("image.pos", image_rows, d, s, &mut rng);
        let image_layers = (0..cfg.image_layers)
            .map(|i| EncoderLayer::new(&mut st, &mut rng, &format!("image.layers.{i}"), &cfg))
            .collect();

        let text_tok = st.add_normal("report.tok", cfg.vocab_size, d, s, &mut rng);
        let text_pos = st.add_normal("report.pos", cfg.max_text_len, d, s, &mut rng);
        let report_layers = (0..cfg.report_layers)
            .map(|i| EncoderLayer::new(&mut st, &mut rng, &format!("report.layers.{i}"), &cfg))
            .collect();

        let graph_layers = (0..cfg.graph_layers)
            .map(|i| EncoderLayer::new(&mut st, &mut rng, &format!("graph.layers.{i}"), &cfg))
            .collect();
        let graph_attn = CrossLayer::new(&mut st, &mut rng, "graph_attn", &cfg);

        let dec_tok = st.add_normal("decoder.tok", cfg.vocab_size, d, s, &mut rng);
        let dec_pos = st.add_normal("decoder.pos", cfg.max_text_len, d, s, &mut rng);
        let dec_layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&mut st, &mut rng, &format!("decoder.layers.{i}"), &cfg))
            .collect();
        // The output head starts at a quarter of the init scale.
        let dec_out = Linear::new(
            &mut st,
            &mut rng,
            "decoder.out",
            d,
            cfg.vocab_size,
            0.25 * s,
            true,
        );

        let mm_layers = (0..cfg.multimodal_layers)
            .map(|i| DecoderLayer::new(&mut st, &mut rng, &format!("multimodal.layers.{i}"), &cfg))
            .collect();
        let itm_head = Linear::new(&mut st, &mut rng, "itm.head", d, 2, s, true);

        let proj_std = (1.0 / d as f64).sqrt();
        let w_image = st.add_normal("proj.image", d, cfg.proj_dim, proj_std, &mut rng);
        let w_report = st.add_normal("proj.report", d, cfg.proj_dim, proj_std, &mut rng);
        let log_tau = st.add("log_tau", Mat::scalar(cfg.tau_init.ln()), false);

        Ok((
            ReportModel {
                config: cfg,
                patch,
                image_cls,
                image_pos,
                image_layers,
                text_tok,
                text_pos,
                report_layers,
                graph_layers,
                graph_attn,
                dec_tok,
                dec_pos,
                dec_layers,
                dec_out,
                mm_layers,
                itm_head,
                w_image,
                w_report,
                log_tau,
            },
            st,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn itm_head(&self) -> &Linear {
        &self.itm_head
    }

    pub fn decoder_output(&self) -> &Linear {
        &self.dec_out
    }

    pub fn graph_attention_layer(&self) -> &CrossLayer {
        &self.graph_attn
    }

    pub fn graph_layers(&self) -> &[EncoderLayer] {
        &self.graph_layers
    }

    pub fn projections(&self) -> (ParamId, ParamId) {
        (self.w_image, self.w_report)
    }

    pub fn log_tau(&self) -> ParamId {
        self.log_tau
    }

    /// `[1 + views * patches, d]`; row 0 is `[CLS]`.
    pub fn encode_views(&self, t: &mut Tape, views: &[&GrayImage]) -> Result<Var> {
        let cfg = &self.config;
        if views.len() != cfg.views {
            return Err(Error::shape(
                "encode_image",
                format!("expected {} view(s), got {}", cfg.views, views.len()),
            ));
        }
        let mut parts = vec![t.param(self.image_cls)];
        for img in views {
            if img.height() != cfg.image_size || img.width() != cfg.image_size {
                // Still reject indivisible sizes with the dedicated error.
                img.patches(cfg.patch_size)?;
                return Err(Error::shape(
                    "encode_image",
                    format!(
                        "image is {}x{}, model expects {s}x{s}",
                        img.height(),
                        img.width(),
                        s = cfg.image_size
                    ),
                ));
            }
            let p = t.constant(img.standardized().patches(cfg.patch_size)?);
            parts.push(self.patch.forward(t, p));
        }
        let x = t.concat_rows(&parts);
        let pos = t.param(self.image_pos);
        let x = t.add(x, pos);
        Ok(self.image_layers.iter().fold(x, |x, l| l.forward(t, x, None)))
    }

    pub fn encode_image(&self, t: &mut Tape, img: &GrayImage) -> Result<Var> {
        self.encode_views(t, &[img])
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_text_len {
            return Err(Error::shape(
                "text",
                format!(
                    "{} tokens exceed max_text_len {}",
                    tokens.len(),
                    self.config.max_text_len
                ),
            ));
        }
        match tokens.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn embed_text(&self, t: &mut Tape, tok: ParamId, pos: ParamId, ids: &[usize]) -> Var {
        let table = t.param(tok);
        let x = t.gather(table, ids);
        let pos = t.param(pos);
        let p = t.slice_rows(pos, 0, ids.len());
        t.add(x, p)
    }

    /// `[1 + tokens, d]` with `[CLS]` prepended.
    pub fn encode_report(&self, t: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let mut ids = Vec::with_capacity(tokens.len() + 1);
        ids.push(vocab::CLS);
        ids.extend_from_slice(tokens);
        self.check_tokens(&ids)?;
        let x = self.embed_text(t, self.text_tok, self.text_pos, &ids);
        Ok(self.report_layers.iter().fold(x, |x, l| l.forward(t, x, None)))
    }

    /// Graph encoder over node features, attention restricted by adjacency.
    pub fn relational_self_attention(
        &self,
        t: &mut Tape,
        node_features: Var,
        g: &KnowledgeGraph,
    ) -> Result<Var> {
        let (rows, cols) = t.shape(node_features);
        if rows != g.len() || cols != self.config.d_model {
            return Err(Error::shape(
                "relational_self_attention",
                format!(
                    "features {rows}x{cols} for {} nodes, d={}",
                    g.len(),
                    self.config.d_model
                ),
            ));
        }
        let mask = adjacency_to_mask(g);
        let x = self
            .graph_layers
            .iter()
            .fold(node_features, |x, l| l.forward(t, x, Some(&mask)));
        Ok(t.zero_rows(x, &g.real_mask()))
    }

    /// Visual queries over graph keys/values; `visible` flags real nodes.
    pub fn graph_attention(&self, t: &mut Tape, visual: Var, graph: Var, visible: &[bool]) -> Result<Var> {
        let (vr, vc) = t.shape(visual);
        let (gr, gc) = t.shape(graph);
        if vc != gc || gr != visible.len() {
            return Err(Error::shape(
                "graph_attention",
                format!("visual {vr}x{vc}, graph {gr}x{gc}, mask {}", visible.len()),
            ));
        }
        let mask = AttentionMask::key_padding(vr, visible);
        Ok(self.graph_attn.forward(t, visual, graph, Some(&mask)))
    }

    /// Log-probabilities `[tokens, vocab]`; row `i` predicts token `i + 1`.
    pub fn decode(&self, t: &mut Tape, tokens: &[usize], memory: Var) -> Result<Var> {
        if tokens.first() != Some(&vocab::DECODE) {
            return Err(Error::MissingPrefix("[Decode]"));
        }
        self.check_tokens(tokens)?;
        let y = self.embed_text(t, self.dec_tok, self.dec_pos, tokens);
        let causal = AttentionMask::causal(tokens.len());
        let y = self
            .dec_layers
            .iter()
            .fold(y, |y, l| l.forward(t, y, Some(&causal), memory));
        let logits = self.dec_out.forward(t, y);
        Ok(t.log_softmax(logits))
    }

    /// Report tokens (starting with `[Encode]`) cross-attending to visual
    /// features; row 0 is the fused `[Encode]` vector.
    pub fn multimodal_encode(&self, t: &mut Tape, tokens: &[usize], visual: Var) -> Result<Var> {
        if tokens.first() != Some(&vocab::ENCODE) {
            return Err(Error::MissingPrefix("[Encode]"));
        }
        self.check_tokens(tokens)?;
        let x = self.embed_text(t, self.text_tok, self.text_pos, tokens);
        Ok(self
            .mm_layers
            .iter()
            .fold(x, |x, l| l.forward(t, x, None, visual)))
    }

    /// `[1, 2]` match logits from the fused `[Encode]` row.
    pub fn itm_logits(&self, t: &mut Tape, fused: Var) -> Var {
        let row = t.slice_rows(fused, 0, 1);
        self.itm_head.forward(t, row)
    }

    fn project_cls(&self, t: &mut Tape, seq: Var, w: ParamId) -> Var {
        let cls = t.slice_rows(seq, 0, 1);
        let w = t.param(w);
        let p = t.matmul(cls, w);
        t.l2_normalize(p)
    }

    /// Unit-normalized `W_I` projection of the image `[CLS]`.
    pub fn image_embedding(&self, t: &mut Tape, visual: Var) -> Var {
        self.project_cls(t, visual, self.w_image)
    }

    /// Unit-normalized `W_T` projection of the report `[CLS]`.
    pub fn report_embedding(&self, t: &mut Tape, report: Var) -> Var {
        self.project_cls(t, report, self.w_report)
    }

    /// `1 / tau` as a `[1, 1]` node; tau is stored in log space.
    pub fn inverse_temperature(&self, t: &mut Tape) -> Var {
        let lt = t.param(self.log_tau);
        let neg = t.scale(lt, -1.0);
        t.exp(neg)
    }
}

/// Online parameters plus momentum copies of the image/report encoders and
/// projections.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: ReportModel,
    pub params: ParamStore,
    pub momentum: ParamStore,
}

impl ModelState {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (model, params) = ReportModel::build(config, seed)?;
        let momentum = params.clone();
        Ok(ModelState {
            model,
            params,
            momentum,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn momentum_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| {
                let name = &self.params.entry(id).name;
                MOMENTUM_PREFIXES.iter().any(|p| name.starts_with(p))
            })
            .collect()
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(self.model.log_tau()).scalar_value().exp()
    }
}

/// Single-head scaled dot-product attention on plain matrices.
pub fn scaled_dot_attention(q: &Mat, k: &Mat, v: &Mat, mask: Option<&AttentionMask>) -> Result<Mat> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.cols() == 0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != (q.rows(), k.rows()) {
            return Err(Error::shape(
                "scaled_dot_attention",
                format!("mask {:?} for scores {}x{}", m.shape(), q.rows(), k.rows()),
            ));
        }
    }
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let (qv, kv, vv) = (
        t.constant(q.clone()),
        t.constant(k.clone()),
        t.constant(v.clone()),
    );
    let out = t.attention(qv, kv, vv, 1, mask);
    Ok(t.value(out).clone())
}
