//! PTv3-lite backbone with condition-selected normalization affines and the
//! two segmentation heads.
//!
//! Each encoder stage serializes its points along a space-filling curve,
//! splits the sorted sequence into contiguous patches and runs
//! `[attention -> norm -> MLP -> norm]` blocks inside each patch. Stages are
//! linked by mean grid pooling; the decoder copies coarse features back to
//! the finer points, concatenates the skip features and fuses them linearly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{patch_offsets, Tape, Tensor, Var};
use crate::data::{ConditionTag, PointScan, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig};
use crate::network::config::{Alignment, ModelConfig};
use crate::network::embedding::EmbeddingTable;
use crate::network::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::serialization::{grid_pool_map, quantize, serialize_voxels, voxel_sample, GridSpec};

pub const NORM_EPS: f64 = 1e-5;
/// Initial logit scale `1 / 0.07`, stored as its logarithm.
pub const INITIAL_LOGIT_SCALE: f64 = 1.0 / 0.07;
const NORM_FLOOR: f64 = 1e-12;

/// A tape plus lazily bound model parameters. Parameters only become tape
/// leaves when a forward pass touches them, so untouched ones get exactly
/// zero gradient.
pub struct Graph<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .params
            .position(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.tape.param(self.params.tensor(i).clone());
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// `x W + b` with parameters `{prefix}.weight` and `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let rows = self.tape.shape(x)[0];
        let y = self.tape.matmul(x, w)?;
        let bias = self.tape.expand_rows(b, rows)?;
        self.tape.add(y, bias)
    }

    pub fn gradients(&self, out: Var) -> Result<ParamGrads<T>> {
        let grads = self.tape.backward(out)?;
        Ok(ParamGrads::from_parts(
            self.bound
                .iter()
                .map(|b| b.and_then(|v| grads.get(v).map(<[T]>::to_vec)))
                .collect(),
        ))
    }
}

/// Per-point standardization over channels: `(x - mean) / sqrt(var + eps)`.
pub fn layer_normalize<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = match tape.shape(x) {
        [_, c] => *c,
        s => {
            return Err(Error::shape(
                "prompted_norm",
                format!("expected [n, C], got {s:?}"),
            ))
        }
    };
    let mean = tape.mean_axis(x, 1)?;
    let mean = tape.expand_cols(mean, c)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, 1)?;
    let var = tape.add_scalar(var, T::lit(NORM_EPS));
    let inv = tape.powf(var, T::lit(-0.5));
    let inv = tape.expand_cols(inv, c)?;
    tape.mul(centered, inv)
}

/// `gamma * normalize(x) + beta` with `[1, C]` affine parameters.
pub fn prompted_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.shape(x)[0];
    let core = layer_normalize(tape, x)?;
    let g = tape.expand_rows(gamma, n)?;
    let b = tape.expand_rows(beta, n)?;
    let y = tape.mul(core, g)?;
    tape.add(y, b)
}

#[derive(Clone, Debug)]
struct PoolStep<T> {
    cell_of: Vec<usize>,
    inv_counts: Vec<T>,
    cells: usize,
}

#[derive(Clone, Debug)]
struct StagePlan<T> {
    perm: Vec<usize>,
    inverse: Vec<usize>,
    offsets: Vec<usize>,
    /// Offsets of each point from its patch centroid, in serialized order.
    rel_pos: Tensor<T>,
    pool: Option<PoolStep<T>>,
}

/// Parameter-free geometry for one scan: serialization orders, patches and
/// pooling maps for every stage. Depends only on point coordinates.
#[derive(Clone, Debug)]
pub struct PreparedScan<T> {
    features: Tensor<T>,
    stages: Vec<StagePlan<T>>,
}

impl<T: Scalar> PreparedScan<T> {
    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point count at each encoder stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.perm.len()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Const(f64),
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: &str, fan_in: usize, fan_out: usize| {
        out.push((
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            Init::FanIn(fan_in),
        ));
        out.push((format!("{prefix}.bias"), vec![1, fan_out], Init::Zeros));
    };
    let norm = |out: &mut Vec<_>, site: &str, width: usize| {
        for cond in &config.conditions {
            out.push((format!("{site}.{cond}.gamma"), vec![1, width], Init::Ones));
            out.push((format!("{site}.{cond}.beta"), vec![1, width], Init::Zeros));
        }
    };
    let ch = &config.stage_channels;
    linear(&mut out, "stem", config.input_channels, ch[0]);
    norm(&mut out, "stem.norm", ch[0]);
    for (s, (&c, &depth)) in ch.iter().zip(&config.stage_depths).enumerate() {
        if s > 0 {
            linear(&mut out, &format!("enc{s}.down"), ch[s - 1], c);
            norm(&mut out, &format!("enc{s}.down.norm"), c);
        }
        linear(&mut out, &format!("enc{s}.pos"), 3, c);
        for b in 0..depth {
            let p = format!("enc{s}.block{b}");
            linear(&mut out, &format!("{p}.qkv"), c, 3 * c);
            linear(&mut out, &format!("{p}.proj"), c, c);
            norm(&mut out, &format!("{p}.norm1"), c);
            linear(&mut out, &format!("{p}.fc1"), c, config.mlp_ratio * c);
            linear(&mut out, &format!("{p}.fc2"), config.mlp_ratio * c, c);
            norm(&mut out, &format!("{p}.norm2"), c);
        }
    }
    for s in 1..ch.len() {
        linear(
            &mut out,
            &format!("dec{}.fuse", s - 1),
            ch[s] + ch[s - 1],
            ch[s - 1],
        );
        norm(&mut out, &format!("dec{}.fuse.norm", s - 1), ch[s - 1]);
    }
    match config.alignment {
        Alignment::Da => {
            for cond in &config.conditions {
                linear(&mut out, &format!("head.da.{cond}"), ch[0], NUM_CLASSES);
            }
        }
        Alignment::La => {
            linear(&mut out, "head.la.proj", ch[0], config.embed_dim);
            out.push((
                "head.la.logit_scale".into(),
                vec![1],
                Init::Const(INITIAL_LOGIT_SCALE.ln()),
            ));
        }
    }
    out
}

/// Segmentation network: backbone plus the configured head.
#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    table: Option<EmbeddingTable>,
    /// L2-normalized table rows, `[NUM_CLASSES, D]`.
    table_rows: Option<Tensor<T>>,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh model with seeded fan-in uniform weights, unit gammas and zero
    /// betas and biases. `table` is required for language alignment.
    pub fn new(config: ModelConfig, seed: u64, table: Option<EmbeddingTable>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let n: usize = shape.iter().product();
            let values = match init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| T::lit(rng.gen_range(-bound..bound)))
                        .collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Const(v) => vec![T::lit(v); n],
            };
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        Self::from_parts(config, params, table)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        table: Option<EmbeddingTable>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        let table_rows = match (config.alignment, &table) {
            (Alignment::La, None) => {
                return Err(Error::Config(
                    "language alignment requires an embedding table".into(),
                ))
            }
            (Alignment::La, Some(t)) => {
                if t.dim != config.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding dim {} does not match model embed_dim {}",
                        t.dim, config.embed_dim
                    )));
                }
                if t.rows() != NUM_CLASSES {
                    return Err(Error::Embedding(format!(
                        "row count {} != {NUM_CLASSES}",
                        t.rows()
                    )));
                }
                let rows = t.normalized_rows().into_iter().map(T::lit).collect();
                Some(Tensor::new(vec![NUM_CLASSES, t.dim], rows)?)
            }
            (Alignment::Da, _) => None,
        };
        Ok(Self {
            config,
            params,
            table,
            table_rows,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embedding_table(&self) -> Option<&EmbeddingTable> {
        self.table.as_ref()
    }

    /// Serialization orders, patches and pool maps for `scan`.
    pub fn prepare(&self, scan: &PointScan) -> Result<PreparedScan<T>> {
        let cfg = &self.config;
        let n = scan.len();
        let features = Tensor::new(
            vec![n, 4],
            scan.features()
                .iter()
                .flat_map(|f| f.map(|v| T::lit(f64::from(v))))
                .collect(),
        )?;
        let grid = GridSpec::for_points(scan.coords(), cfg.voxel_size, cfg.bits_per_axis)?;
        let mut voxels = quantize(scan.coords(), &grid)?;
        let mut coords: Vec<[f64; 3]> = scan.coords().iter().map(|p| p.map(f64::from)).collect();
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        for s in 0..cfg.stage_channels.len() {
            let order = serialize_voxels(&voxels, cfg.curve_for_stage(s), cfg.bits_per_axis)?;
            let m = voxels.len();
            let offsets = patch_offsets(m, cfg.patch_size);
            let mut rel = Vec::with_capacity(m * 3);
            for w in offsets.windows(2) {
                let members = &order.permutation[w[0]..w[1]];
                let mut centroid = [0.0; 3];
                for &i in members {
                    for a in 0..3 {
                        centroid[a] += coords[i][a];
                    }
                }
                let len = members.len() as f64;
                for &i in members {
                    for a in 0..3 {
                        rel.push(T::lit(coords[i][a] - centroid[a] / len));
                    }
                }
            }
            let pool = if s + 1 < cfg.stage_channels.len() {
                let map = grid_pool_map(&order, &voxels, cfg.pool_stride)?;
                let counts = map.counts();
                let mut next = vec![[0.0; 3]; map.num_cells];
                for (i, &c) in map.cell_of.iter().enumerate() {
                    for a in 0..3 {
                        next[c][a] += coords[i][a];
                    }
                }
                for (p, &k) in next.iter_mut().zip(&counts) {
                    *p = p.map(|v| v / k as f64);
                }
                coords = next;
                voxels = map.cell_voxels.clone();
                Some(PoolStep {
                    inv_counts: counts
                        .iter()
                        .map(|&k| T::one() / T::lit(k as f64))
                        .collect(),
                    cells: map.num_cells,
                    cell_of: map.cell_of,
                })
            } else {
                None
            };
            stages.push(StagePlan {
                inverse: order.inverse(),
                perm: order.permutation,
                offsets,
                rel_pos: Tensor::new(vec![m, 3], rel)?,
                pool,
            });
        }
        Ok(PreparedScan { features, stages })
    }

    fn norm(&self, g: &mut Graph<'_, T>, site: &str, x: Var, cond: &ConditionTag) -> Result<Var> {
        let cond = self.config.resolve_condition(cond)?;
        let gamma = g.param(&format!("{site}.{cond}.gamma"))?;
        let beta = g.param(&format!("{site}.{cond}.beta"))?;
        prompted_norm(&mut g.tape, x, gamma, beta)
    }

    /// Per-point backbone features `[N, C0]` at input resolution.
    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        prep: &PreparedScan<T>,
        cond: &ConditionTag,
    ) -> Result<Var> {
        let cfg = &self.config;
        self.config.resolve_condition(cond)?;
        let x = g.tape.constant(prep.features.clone());
        let h = g.linear("stem", x)?;
        let mut h = self.norm(g, "stem.norm", h, cond)?;
        let mut skips = Vec::with_capacity(prep.stages.len());
        for (s, plan) in prep.stages.iter().enumerate() {
            let c = cfg.stage_channels[s];
            if s > 0 {
                let pool = prep.stages[s - 1]
                    .pool
                    .as_ref()
                    .expect("pool map for every inner stage");
                let summed = g.tape.scatter_add(h, &pool.cell_of, pool.cells)?;
                let pooled = g.tape.row_scale(summed, &pool.inv_counts)?;
                let down = g.linear(&format!("enc{s}.down"), pooled)?;
                h = self.norm(g, &format!("enc{s}.down.norm"), down, cond)?;
            }
            let n = plan.perm.len();
            let mut hs = g.tape.gather(h, &plan.perm)?;
            let rel = g.tape.constant(plan.rel_pos.clone());
            let pos = g.linear(&format!("enc{s}.pos"), rel)?;
            let (heads, dim) = (cfg.heads, c / cfg.heads);
            for b in 0..cfg.stage_depths[s] {
                let p = format!("enc{s}.block{b}");
                let a_in = g.tape.add(hs, pos)?;
                let qkv = g.linear(&format!("{p}.qkv"), a_in)?;
                let mut qkv_parts = [None; 3];
                for (k, part) in qkv_parts.iter_mut().enumerate() {
                    let slice = g.tape.slice_cols(qkv, k * c, (k + 1) * c)?;
                    *part = Some(g.tape.reshape(slice, &[n, heads, dim])?);
                }
                let [q, k, v] = qkv_parts.map(Option::unwrap);
                let att = g.tape.attention(q, k, v, &plan.offsets)?;
                let att = g.tape.reshape(att, &[n, c])?;
                let att = g.linear(&format!("{p}.proj"), att)?;
                let res = g.tape.add(hs, att)?;
                hs = self.norm(g, &format!("{p}.norm1"), res, cond)?;
                let m = g.linear(&format!("{p}.fc1"), hs)?;
                let m = g.tape.relu(m);
                let m = g.linear(&format!("{p}.fc2"), m)?;
                let res = g.tape.add(hs, m)?;
                hs = self.norm(g, &format!("{p}.norm2"), res, cond)?;
            }
            h = g.tape.gather(hs, &plan.inverse)?;
            skips.push(h);
        }
        for s in (1..prep.stages.len()).rev() {
            let pool = prep.stages[s - 1]
                .pool
                .as_ref()
                .expect("pool map for every inner stage");
            let up = g.tape.gather(h, &pool.cell_of)?;
            let cat = g.tape.concat(&[up, skips[s - 1]], 1)?;
            let fused = g.linear(&format!("dec{}.fuse", s - 1), cat)?;
            h = self.norm(g, &format!("dec{}.fuse.norm", s - 1), fused, cond)?;
        }
        Ok(h)
    }

    /// Logits from the condition's own linear head.
    pub fn head_decoupled(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        cond: &ConditionTag,
    ) -> Result<Var> {
        if self.config.alignment != Alignment::Da {
            return Err(Error::Config(
                "model was built with the language head".into(),
            ));
        }
        let cond = self.config.resolve_condition(cond)?;
        g.linear(&format!("head.da.{cond}"), features)
    }

    /// Scaled cosine similarity between projected features and the class embeddings.
    pub fn head_language(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let table = self
            .table_rows
            .as_ref()
            .ok_or_else(|| Error::Config("model was built with the decoupled heads".into()))?;
        let proj = g.linear("head.la.proj", features)?;
        let d = g.tape.shape(proj)[1];
        let sq = g.tape.mul(proj, proj)?;
        let sumsq = g.tape.sum_axis(sq, 1)?;
        // clamp on the squared norm keeps the gradient finite at zero
        let sumsq = g.tape.clamp_min(sumsq, T::lit(NORM_FLOOR * NORM_FLOOR));
        let inv = g.tape.powf(sumsq, T::lit(-0.5));
        let inv = g.tape.expand_cols(inv, d)?;
        let unit = g.tape.mul(proj, inv)?;
        let rows = g.tape.constant(table.clone());
        let rows_t = g.tape.transpose(rows)?;
        let cos = g.tape.matmul(unit, rows_t)?;
        let log_scale = g.param("head.la.logit_scale")?;
        let scale = g.tape.exp(log_scale);
        g.tape.mul(scale, cos)
    }

    /// Backbone followed by the configured head, `[N, NUM_CLASSES]`.
    pub fn logits(
        &self,
        g: &mut Graph<'_, T>,
        prep: &PreparedScan<T>,
        cond: &ConditionTag,
    ) -> Result<Var> {
        let feats = self.encode(g, prep, cond)?;
        match self.config.alignment {
            Alignment::Da => self.head_decoupled(g, feats, cond),
            Alignment::La => self.head_language(g, feats),
        }
    }

    /// Combined loss on labelled prepared points and its parameter gradients.
    /// Returns `None` for the loss when every label is ignored.
    pub fn loss_and_grads(
        &self,
        prep: &PreparedScan<T>,
        labels: &[usize],
        cond: &ConditionTag,
        loss: &LossConfig,
    ) -> Result<(Option<T>, ParamGrads<T>)> {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, prep, cond)?;
        let term = combined_loss(&mut g.tape, logits, labels, loss)?;
        if term.all_ignored {
            return Ok((None, ParamGrads::zeros_like(&self.params)));
        }
        let value = g.tape.scalar(term.var);
        Ok((Some(value), g.gradients(term.var)?))
    }

    /// Arg-max class per prepared point (ties go to the lowest index).
    pub fn predict_prepared(
        &self,
        prep: &PreparedScan<T>,
        cond: &ConditionTag,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.params);
        let logits = self.logits(&mut g, prep, cond)?;
        Ok(argmax_rows(g.tape.value(logits), NUM_CLASSES))
    }

    /// Predictions for every point of `scan`: one representative per voxel
    /// is classified and its label is copied to the voxel's other points.
    pub fn predict_scan(&self, scan: &PointScan) -> Result<Vec<usize>> {
        let sample = self.voxel_sample(scan)?;
        let reps = scan.select(&sample.representatives)?;
        let prep = self.prepare(&reps)?;
        let pred = self.predict_prepared(&prep, scan.condition())?;
        Ok(sample.point_to_sample.iter().map(|&k| pred[k]).collect())
    }

    /// One point per occupied voxel of the stage-0 grid.
    pub fn voxel_sample(&self, scan: &PointScan) -> Result<crate::serialization::VoxelSample> {
        let cfg = &self.config;
        let grid = GridSpec::for_points(scan.coords(), cfg.voxel_size, cfg.bits_per_axis)?;
        let voxels = quantize(scan.coords(), &grid)?;
        let order = serialize_voxels(&voxels, cfg.curve_for_stage(0), cfg.bits_per_axis)?;
        Ok(voxel_sample(&order))
    }
}

pub fn argmax_rows<T: Scalar>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// True for parameters owned by a single condition (its norm affines and
/// decoupled head), returning that condition's name.
pub fn condition_of_param<'a>(name: &'a str, config: &ModelConfig) -> Option<&'a str> {
    name.split('.')
        .find(|seg| config.conditions.iter().any(|c| c.as_str() == *seg))
}

/// Heads, projections and the logit scale; everything else is backbone.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Parameters exempt from weight decay: norm affines, biases, logit scale.
pub fn is_no_decay_param(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("logit_scale")
}
