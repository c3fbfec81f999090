//! Embedding layers, context/target encoders and the predictor.

mod checkpoint;
mod params;

pub use checkpoint::{
    read_container, write_container, Checkpoint, CheckpointMeta, ContainerManifest, RngState, TensorEntry,
    CHECKPOINT_FORMAT,
};
pub use params::{init_normal, init_uniform, BindMode, Binder, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedSample, FeatureKind, FeatureSchema};
use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::numeric::nn::{transformer_block, AttentionVars, BlockVars};
use crate::numeric::{Graph, Real, Tensor, Var};

/// Standard deviation for embedding vectors (feature weights, index, type,
/// REG, mask token).
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cardinalities: Vec<usize>,
    pub kinds: Vec<FeatureKind>,
    pub hidden: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub feedforward: usize,
    pub dropout: f64,
    pub pred_hidden: usize,
    pub pred_num_heads: usize,
    pub pred_num_layers: usize,
    pub pred_feedforward: usize,
    pub pred_dropout: f64,
    pub n_reg: usize,
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.cardinalities.len()
    }

    /// Features and hyperparameters for a fitted schema.
    pub fn for_schema(schema: &FeatureSchema, template: &ModelConfig) -> ModelConfig {
        ModelConfig {
            cardinalities: schema.cardinalities(),
            kinds: schema.kinds(),
            ..template.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() == 0 || self.kinds.len() != self.d() {
            return Err(Error::Config("model needs at least one feature and one kind per feature".into()));
        }
        if self.cardinalities.contains(&0) {
            return Err(Error::Config("feature cardinality must be >= 1".into()));
        }
        if self.num_heads == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim_hidden {} is not divisible by model_num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if self.pred_num_heads == 0 || !self.pred_hidden.is_multiple_of(self.pred_num_heads) {
            return Err(Error::Config(format!(
                "pred_embed_dim {} is not divisible by pred_num_heads {}",
                self.pred_hidden, self.pred_num_heads
            )));
        }
        if self.pred_hidden > self.hidden {
            return Err(Error::Config(format!(
                "pred_embed_dim {} exceeds model_dim_hidden {}",
                self.pred_hidden, self.hidden
            )));
        }
        for (name, p) in [("model_dropout_prob", self.dropout), ("pred_p_dropout", self.pred_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub feature_w: Vec<ParamId>,
    pub feature_b: Vec<ParamId>,
    pub index: ParamId,
    pub kind: ParamId,
    pub reg: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl BlockParams {
    fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, h: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |store: &mut ParamStore<T>, name: &str, a: usize, b: usize| {
            let w = store.add(format!("{prefix}.{name}.weight"), init_uniform(&[a, b], a, rng));
            let bias = store.add(format!("{prefix}.{name}.bias"), init_uniform(&[b], a, rng));
            (w, bias)
        };
        let ln1_g = store.add(format!("{prefix}.ln1.gamma"), Tensor::ones(&[h]));
        let ln1_b = store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[h]));
        let (wq, bq) = lin(store, "attn.q", h, h);
        let (wk, bk) = lin(store, "attn.k", h, h);
        let (wv, bv) = lin(store, "attn.v", h, h);
        let (wo, bo) = lin(store, "attn.out", h, h);
        let ln2_g = store.add(format!("{prefix}.ln2.gamma"), Tensor::ones(&[h]));
        let ln2_b = store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[h]));
        let (ff1_w, ff1_b) = lin(store, "ff1", h, ff);
        let (ff2_w, ff2_b) = lin(store, "ff2", ff, h);
        BlockParams {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
        }
    }

    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.ln2_g, self.ln2_b, self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b,
        ]
    }

    fn bind<T: Real>(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, mode: BindMode) -> BlockVars {
        let mut v = |id| b.bind(g, id, mode);
        BlockVars {
            ln1_g: v(self.ln1_g),
            ln1_b: v(self.ln1_b),
            attn: AttentionVars {
                wq: v(self.wq),
                bq: v(self.bq),
                wk: v(self.wk),
                bk: v(self.bk),
                wv: v(self.wv),
                bv: v(self.bv),
                wo: v(self.wo),
                bo: v(self.bo),
            },
            ln2_g: v(self.ln2_g),
            ln2_b: v(self.ln2_b),
            ff1_w: v(self.ff1_w),
            ff1_b: v(self.ff1_b),
            ff2_w: v(self.ff2_w),
            ff2_b: v(self.ff2_b),
        }
    }

    /// Zeroes the output projections of both residual branches, turning the
    /// block into the identity map.
    pub fn zero_residual_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.wo, self.bo, self.ff2_w, self.ff2_b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}

/// A stack of transformer blocks (`f_θ` or its EMA twin `f_θ̄`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub num_heads: usize,
    pub dropout: f64,
}

impl EncoderParams {
    pub fn ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(BlockParams::ids).collect()
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        mut x: Var,
        mode: BindMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        for block in &self.blocks {
            let vars = block.bind(g, b, mode);
            x = transformer_block(g, x, &vars, self.num_heads, self.dropout, rng.as_deref_mut())?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub encoder: EncoderParams,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl PredictorParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.down_w, self.down_b, self.mask_token, self.pos];
        ids.extend(self.encoder.ids());
        ids.extend([self.up_w, self.up_b]);
        ids
    }
}

/// Every learnable tensor plus the layout that addresses it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embedding: EmbeddingParams,
    pub context: EncoderParams,
    pub target: EncoderParams,
    pub predictor: PredictorParams,
}

impl<T: Real> ModelState<T> {
    /// Deterministically initialized model. The target encoder starts as an
    /// exact copy of the context encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let d = config.d();

        let mut feature_w = Vec::with_capacity(d);
        let mut feature_b = Vec::with_capacity(d);
        for (j, &e) in config.cardinalities.iter().enumerate() {
            feature_w.push(store.add(format!("embed.feature.{j}.weight"), init_normal(&[e, h], EMBED_INIT_STD, &mut rng)));
            feature_b.push(store.add(format!("embed.feature.{j}.bias"), init_uniform(&[h], h, &mut rng)));
        }
        let index = store.add("embed.index", init_normal(&[d, h], EMBED_INIT_STD, &mut rng));
        let kind = store.add("embed.type", init_normal(&[2, h], EMBED_INIT_STD, &mut rng));
        let reg = (config.n_reg > 0)
            .then(|| store.add("embed.reg", init_normal(&[config.n_reg, h], EMBED_INIT_STD, &mut rng)));
        let embedding = EmbeddingParams {
            feature_w,
            feature_b,
            index,
            kind,
            reg,
        };

        let context = EncoderParams {
            blocks: (0..config.num_layers)
                .map(|l| BlockParams::init(&mut store, &format!("context.block.{l}"), h, config.feedforward, &mut rng))
                .collect(),
            num_heads: config.num_heads,
            dropout: config.dropout,
        };

        let hp = config.pred_hidden;
        let down_w = store.add("predictor.down.weight", init_uniform(&[h, hp], h, &mut rng));
        let down_b = store.add("predictor.down.bias", init_uniform(&[hp], h, &mut rng));
        let mask_token = store.add("predictor.mask_token", init_normal(&[hp], EMBED_INIT_STD, &mut rng));
        let pos = store.add("predictor.pos", init_normal(&[d, hp], EMBED_INIT_STD, &mut rng));
        let pred_encoder = EncoderParams {
            blocks: (0..config.pred_num_layers)
                .map(|l| BlockParams::init(&mut store, &format!("predictor.block.{l}"), hp, config.pred_feedforward, &mut rng))
                .collect(),
            num_heads: config.pred_num_heads,
            dropout: config.pred_dropout,
        };
        let up_w = store.add("predictor.up.weight", init_uniform(&[hp, h], hp, &mut rng));
        let up_b = store.add("predictor.up.bias", init_uniform(&[h], hp, &mut rng));
        let predictor = PredictorParams {
            down_w,
            down_b,
            mask_token,
            pos,
            encoder: pred_encoder,
            up_w,
            up_b,
        };

        // Target twin: same layout, copied weights.
        let mut target_blocks = Vec::with_capacity(context.blocks.len());
        for block in &context.blocks {
            let ids = block.ids();
            let copy: Vec<ParamId> = ids
                .iter()
                .map(|&id| {
                    let name = store.name(id).replacen("context.", "target.", 1);
                    let t = store.get(id).clone();
                    store.add(name, t)
                })
                .collect();
            target_blocks.push(BlockParams {
                ln1_g: copy[0],
                ln1_b: copy[1],
                wq: copy[2],
                bq: copy[3],
                wk: copy[4],
                bk: copy[5],
                wv: copy[6],
                bv: copy[7],
                wo: copy[8],
                bo: copy[9],
                ln2_g: copy[10],
                ln2_b: copy[11],
                ff1_w: copy[12],
                ff1_b: copy[13],
                ff2_w: copy[14],
                ff2_b: copy[15],
            });
        }
        let target = EncoderParams {
            blocks: target_blocks,
            num_heads: config.num_heads,
            dropout: config.dropout,
        };

        Ok(ModelState {
            config,
            store,
            embedding,
            context,
            target,
            predictor,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d()
    }

    pub fn n_reg(&self) -> usize {
        self.config.n_reg
    }

    pub fn embedding_ids(&self) -> Vec<ParamId> {
        let e = &self.embedding;
        let mut ids: Vec<ParamId> = e.feature_w.iter().chain(&e.feature_b).copied().collect();
        ids.extend([e.index, e.kind]);
        ids.extend(e.reg);
        ids
    }

    /// Parameters updated by the optimizer: embeddings, `θ` and `φ`.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_ids();
        ids.extend(self.context.ids());
        ids.extend(self.predictor.ids());
        ids.sort();
        ids
    }

    /// `(target, context)` pairs for the EMA update.
    pub fn ema_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.target.ids().into_iter().zip(self.context.ids()).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            store: self.store.cast(),
            embedding: self.embedding.clone(),
            context: self.context.clone(),
            target: self.target.clone(),
            predictor: self.predictor.clone(),
        }
    }

    /// Embeds the unmasked features of a sample and appends the REG rows:
    /// row `j` is `W_j·E(x_j) + b_j + index[j] + type[kind(j)]`.
    pub fn embed_sample(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        sample: &EncodedSample<T>,
        mask: Option<&Mask>,
        mode: BindMode,
    ) -> Result<Var> {
        let d = self.d();
        if sample.d() != d {
            return Err(Error::dim(format!("sample has {} features, model {d}", sample.d())));
        }
        let visible = match mask {
            Some(m) if m.d() != d => {
                return Err(Error::dim(format!("mask covers {} features, model {d}", m.d())))
            }
            Some(m) => m.visible(),
            None => (0..d).collect(),
        };
        let e = &self.embedding;
        let mut rows = Vec::with_capacity(visible.len() + 1);
        for &j in &visible {
            let x = &sample.features[j];
            let ej = self.config.cardinalities[j];
            if x.len() != ej {
                return Err(Error::dim(format!(
                    "feature {j} is encoded with width {}, expected e_j = {ej}",
                    x.len()
                )));
            }
            let xv = g.constant(Tensor::new(vec![1, ej], x.clone())?);
            let w = b.bind(g, e.feature_w[j], mode);
            let bias = b.bind(g, e.feature_b[j], mode);
            let y = g.matmul(xv, w)?;
            rows.push(g.add_row(y, bias)?);
        }
        let mut z = if rows.is_empty() {
            None
        } else {
            let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
            let index = b.bind(g, e.index, mode);
            let kind = b.bind(g, e.kind, mode);
            let idx_rows = g.select_rows(index, &visible)?;
            let kinds: Vec<usize> = visible.iter().map(|&j| self.config.kinds[j].type_index()).collect();
            let kind_rows = g.select_rows(kind, &kinds)?;
            let z = g.add(stacked, idx_rows)?;
            Some(g.add(z, kind_rows)?)
        };
        if let Some(reg) = e.reg {
            let r = b.bind(g, reg, mode);
            z = Some(match z {
                Some(z) => g.concat_rows(&[z, r])?,
                None => r,
            });
        }
        z.ok_or_else(|| Error::Contract("embedding produced no tokens".into()))
    }

    /// `h_context = f_θ(z)`, differentiable in `θ`.
    pub fn context_forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        z: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.context.forward(g, b, z, BindMode::Train, rng)
    }

    /// Context encoder evaluated with plain constants (no trainable leaves).
    pub fn context_forward_inference(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, z: Var) -> Result<Var> {
        self.context.forward(g, b, z, BindMode::Constant, None)
    }

    /// `h_target = f_θ̄(z)`. The target weights enter as stop-gradient
    /// values, so any loss built on this output refuses to backpropagate.
    pub fn target_forward(&self, g: &mut Graph<T>, b: &mut Binder<'_, T>, z: Var) -> Result<Var> {
        self.target.forward(g, b, z, BindMode::Frozen, None)
    }

    /// Drops the trailing REG rows.
    pub fn strip_reg(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        strip_reg(g, h, self.n_reg())
    }

    /// `g_φ(h_context, m_k)`: predicts the representations of the features
    /// visible in `target_mask`, in ascending feature order.
    pub fn predict_targets(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        h_ctx: Var,
        target_mask: &Mask,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let lc = g.shape(h_ctx)[0];
        if lc == 0 {
            return Err(Error::Contract("predictor received an empty context".into()));
        }
        let targets = target_mask.visible();
        if targets.is_empty() {
            return Err(Error::Contract("target mask keeps no feature visible".into()));
        }
        let p = &self.predictor;
        let mode = BindMode::Train;
        let dw = b.bind(g, p.down_w, mode);
        let db = b.bind(g, p.down_b, mode);
        let ctx = crate::numeric::linear_forward(g, h_ctx, dw, db)?;
        let pos = b.bind(g, p.pos, mode);
        let tok = b.bind(g, p.mask_token, mode);
        let pos_rows = g.select_rows(pos, &targets)?;
        let queries = g.add_row(pos_rows, tok)?;
        let seq = g.concat_rows(&[ctx, queries])?;
        let out = p.encoder.forward(g, b, seq, mode, rng)?;
        let lt = targets.len();
        let out_rows: Vec<usize> = (lc..lc + lt).collect();
        let out = g.select_rows(out, &out_rows)?;
        let uw = b.bind(g, p.up_w, mode);
        let ub = b.bind(g, p.up_b, mode);
        crate::numeric::linear_forward(g, out, uw, ub)
    }

    /// Frozen-encoder representation `d×h` of one sample: every feature
    /// visible, REG rows appended for the forward pass and then removed.
    pub fn represent(&self, sample: &EncodedSample<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let mut b = Binder::new(&self.store);
        let z = self.embed_sample(&mut g, &mut b, sample, None, BindMode::Constant)?;
        let h = self.context_forward_inference(&mut g, &mut b, z)?;
        let h = self.strip_reg(&mut g, h)?;
        Ok(g.value(h).clone())
    }
}

/// Removes the last `n_reg` rows of `h`.
pub fn strip_reg<T: Real>(g: &mut Graph<T>, h: Var, n_reg: usize) -> Result<Var> {
    if n_reg == 0 {
        return Ok(h);
    }
    let n = g.shape(h)[0];
    if n <= n_reg {
        return Err(Error::dim(format!("cannot strip {n_reg} REG rows from {n} rows")));
    }
    let keep: Vec<usize> = (0..n - n_reg).collect();
    g.select_rows(h, &keep)
}
