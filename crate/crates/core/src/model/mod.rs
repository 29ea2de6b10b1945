//! The three-layer stack: character embedding, recurrent layers, output
//! head and softmax projection.

mod head;
pub mod init;

use serde::{Deserialize, Serialize};

use crate::cells::{
    self, CellFlags, LayerInput, LayerNorms, LayerShape, LayerState, LayerWeights, StepVars, StreamNorm,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamKind, ParamSet, Real, Tape, Tensor, Var};
use crate::rng;

pub use head::{gated_output, simple_output, HeadVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Hmlstm,
    Hmrnn,
    Lstm,
}

impl Arch {
    pub fn has_boundaries(self) -> bool {
        self != Arch::Lstm
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hmlstm" => Ok(Arch::Hmlstm),
            "hmrnn" => Ok(Arch::Hmrnn),
            "lstm" => Ok(Arch::Lstm),
            _ => Err(format!("unknown arch {s:?} (expected hmlstm, hmrnn or lstm)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Hmlstm => "hmlstm",
            Arch::Hmrnn => "hmrnn",
            Arch::Lstm => "lstm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Gated,
    Simple,
}

impl std::str::FromStr for OutputHead {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gated" => Ok(OutputHead::Gated),
            "simple" => Ok(OutputHead::Simple),
            _ => Err(format!("unknown output head {s:?} (expected gated or simple)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layers: usize,
    pub units: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
    pub vocab_size: usize,
    pub flags: CellFlags,
    pub output_head: OutputHead,
    pub ln_on_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Character-level PTB sizes: 3×512 units, 128-wide embeddings.
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Hmlstm,
            layers: 3,
            units: 512,
            embed_dim: 128,
            output_dim: 512,
            vocab_size: 50,
            flags: CellFlags::default(),
            output_head: OutputHead::Gated,
            ln_on_embeddings: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        let min_layers = if self.arch.has_boundaries() { 2 } else { 1 };
        if self.layers < min_layers {
            return Err(Error::Config(format!(
                "{:?} needs at least {min_layers} layers, got {}",
                self.arch, self.layers
            )));
        }
        for (name, v) in [
            ("units", self.units),
            ("embed_dim", self.embed_dim),
            ("output_dim", self.output_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    /// Shape of layer `l` (0-based, bottom first).
    pub fn layer_shape(&self, l: usize) -> LayerShape {
        let emits_boundary = self.arch.has_boundaries() && l + 1 < self.layers;
        LayerShape {
            input: if l == 0 { self.embed_dim } else { self.units },
            units: self.units,
            per_unit: if self.arch == Arch::Hmrnn { 1 } else { 4 },
            boundary: emits_boundary,
            top_down: (emits_boundary && !self.flags.no_top_down).then_some(self.units),
            layer_norm: self.flags.use_layer_norm,
        }
    }

    /// Number of layers that emit a boundary bit.
    pub fn boundary_layers(&self) -> usize {
        if self.arch.has_boundaries() {
            self.layers - 1
        } else {
            0
        }
    }
}

/// Recurrent state of the whole stack, batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub layers: Vec<LayerState<T>>,
}

impl<T: Real> ModelState<T> {
    /// All-zero hidden and cell states; boundary bits start at 0.
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        ModelState {
            layers: (0..config.layers)
                .map(|l| {
                    let s = config.layer_shape(l);
                    LayerState::zeros(batch, config.units, config.arch != Arch::Hmrnn, s.boundary)
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |l| l.batch())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.is_finite())
    }

    /// Named tensors in a fixed order, for checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, s) in self.layers.iter().enumerate() {
            out.push((format!("state.layer{}.h", l + 1), &s.h));
            if let Some(c) = &s.c {
                out.push((format!("state.layer{}.c", l + 1), c));
            }
            if let Some(z) = &s.z {
                out.push((format!("state.layer{}.z", l + 1), z));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, s) in self.layers.iter_mut().enumerate() {
            out.push((format!("state.layer{}.h", l + 1), &mut s.h));
            if let Some(c) = &mut s.c {
                out.push((format!("state.layer{}.c", l + 1), c));
            }
            if let Some(z) = &mut s.z {
                out.push((format!("state.layer{}.z", l + 1), z));
            }
        }
        out
    }

    /// Keeps only batch row `row` of every tensor.
    pub fn select_row(&self, row: usize) -> Self {
        let pick = |t: &Tensor<T>| Tensor::new(vec![1, t.cols()], t.row(row).to_vec()).expect("row");
        ModelState {
            layers: self
                .layers
                .iter()
                .map(|s| LayerState {
                    h: pick(&s.h),
                    c: s.c.as_ref().map(pick),
                    z: s.z.as_ref().map(pick),
                })
                .collect(),
        }
    }
}

/// Boundary bits of one layer over a forward pass, `bits[b * steps + t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryTrace {
    pub batch: usize,
    pub steps: usize,
    pub bits: Vec<u8>,
}

impl BoundaryTrace {
    pub fn row(&self, b: usize) -> &[u8] {
        &self.bits[b * self.steps..(b + 1) * self.steps]
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Result of [`Model::forward_sequence`].
pub struct ForwardOutput<T> {
    /// `[steps·batch, vocab]`, time-major: row `t·batch + b`.
    pub logits: Var,
    /// One trace per boundary-producing layer (empty for plain LSTMs).
    pub boundaries: Vec<BoundaryTrace>,
    pub state: ModelState<T>,
    pub batch: usize,
    pub steps: usize,
}

/// Every parameter of a model recorded on one tape.
pub struct BoundModel {
    pub vars: Vec<(ParamId, Var)>,
    embed: Var,
    embed_norm: Option<StreamNorm<Var>>,
    layers: Vec<LayerWeights<Var>>,
    head: HeadVars,
    softmax_w: Var,
    softmax_b: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layer{}.{part}", l + 1)
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model from `config.seed`: orthogonal blocks
    /// for every matrix, Glorot-uniform z-logit columns, zero biases and
    /// unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, "init");
        let mut params = ParamSet::new();
        let c = &config;

        params.insert("embed.table", ParamKind::Weight, init::orthogonal_tensor(&mut rng, c.vocab_size, c.embed_dim))?;
        if c.ln_on_embeddings {
            insert_norm(&mut params, "embed.ln", c.embed_dim)?;
        }
        for l in 0..c.layers {
            let s = c.layer_shape(l);
            let out = s.out();
            params.insert(layer_name(l, "W"), ParamKind::Weight, init::gate_matrix(&mut rng, s.input, out, s.boundary))?;
            params.insert(layer_name(l, "U"), ParamKind::Weight, init::gate_matrix(&mut rng, s.units, out, s.boundary))?;
            if let Some(above) = s.top_down {
                params.insert(layer_name(l, "V"), ParamKind::Weight, init::gate_matrix(&mut rng, above, out, s.boundary))?;
            }
            params.insert(layer_name(l, "b"), ParamKind::Bias, Tensor::zeros(&[1, out]))?;
            if s.layer_norm {
                insert_norm(&mut params, &layer_name(l, "ln_w"), out)?;
                insert_norm(&mut params, &layer_name(l, "ln_u"), out)?;
                if s.top_down.is_some() {
                    insert_norm(&mut params, &layer_name(l, "ln_v"), out)?;
                }
            }
        }
        let cat = c.layers * c.units;
        match c.output_head {
            OutputHead::Gated => {
                params.insert("head.gate_w", ParamKind::Weight, init::orthogonal_tensor(&mut rng, cat, c.layers))?;
                for l in 0..c.layers {
                    params.insert(
                        format!("head.embed{}", l + 1),
                        ParamKind::Weight,
                        init::orthogonal_tensor(&mut rng, c.units, c.output_dim),
                    )?;
                }
            }
            OutputHead::Simple => {
                params.insert("head.embed", ParamKind::Weight, init::orthogonal_tensor(&mut rng, cat, c.output_dim))?;
            }
        }
        params.insert("head.bias", ParamKind::Bias, Tensor::zeros(&[1, c.output_dim]))?;
        if c.ln_on_embeddings {
            insert_norm(&mut params, "head.ln", c.output_dim)?;
        }
        params.insert("softmax.W", ParamKind::Weight, init::orthogonal_tensor(&mut rng, c.output_dim, c.vocab_size))?;
        params.insert("softmax.b", ParamKind::Bias, Tensor::zeros(&[1, c.vocab_size]))?;
        Ok(Model { config, params })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let template = Model::<T>::new(config.clone())?;
        if template.params.len() != params.len() {
            return Err(Error::invalid(
                "Model::from_params",
                format!("expected {} parameters, got {}", template.params.len(), params.len()),
            ));
        }
        for p in template.params.iter() {
            let q = params
                .by_name(&p.name)
                .ok_or_else(|| Error::invalid("Model::from_params", format!("missing parameter {}", p.name)))?;
            if q.value.shape() != p.value.shape() {
                return Err(Error::shape("Model::from_params", p.value.shape(), q.value.shape()));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn initial_state(&self, batch: usize) -> ModelState<T> {
        ModelState::zeros(&self.config, batch)
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    fn norm_ids(&self, prefix: &str) -> Option<StreamNorm<ParamId>> {
        let gain = self.params.id(&format!("{prefix}.gain"))?;
        let bias = self.params.id(&format!("{prefix}.bias"))?;
        Some(StreamNorm { gain, bias })
    }

    /// Parameter ids of layer `l` in [`LayerWeights`] form.
    pub fn layer_ids(&self, l: usize) -> LayerWeights<ParamId> {
        let norms = self.norm_ids(&layer_name(l, "ln_w")).map(|w| LayerNorms {
            w,
            u: self.norm_ids(&layer_name(l, "ln_u")).expect("ln_u"),
            v: self.norm_ids(&layer_name(l, "ln_v")),
        });
        LayerWeights {
            w: self.id(&layer_name(l, "W")),
            u: self.id(&layer_name(l, "U")),
            v: self.params.id(&layer_name(l, "V")),
            b: self.id(&layer_name(l, "b")),
            norms,
        }
    }

    /// Current values of layer `l`.
    pub fn layer_weights(&self, l: usize) -> LayerWeights<Tensor<T>> {
        self.layer_ids(l).map(|&id| self.params.get(id).value.clone())
    }

    /// Records every parameter once on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut lookup = vec![None; self.params.len()];
        for (i, _) in self.params.iter().enumerate() {
            let id = ParamId(i);
            let v = tape.param(&self.params, id);
            lookup[i] = Some(v);
            vars.push((id, v));
        }
        let var = |id: ParamId| lookup[id.0].expect("bound");
        let by_name = |name: &str| var(self.id(name));
        let norm = |prefix: &str| self.norm_ids(prefix).map(|n| StreamNorm { gain: var(n.gain), bias: var(n.bias) });

        let layers = (0..self.config.layers)
            .map(|l| self.layer_ids(l).map(|&id| var(id)))
            .collect();
        let head = match self.config.output_head {
            OutputHead::Gated => HeadVars::Gated {
                gate_w: by_name("head.gate_w"),
                embeds: (0..self.config.layers)
                    .map(|l| by_name(&format!("head.embed{}", l + 1)))
                    .collect(),
                bias: by_name("head.bias"),
                norm: norm("head.ln"),
            },
            OutputHead::Simple => HeadVars::Simple {
                embed: by_name("head.embed"),
                bias: by_name("head.bias"),
                norm: norm("head.ln"),
            },
        };
        BoundModel {
            embed: by_name("embed.table"),
            embed_norm: norm("embed.ln"),
            layers,
            head,
            softmax_w: by_name("softmax.W"),
            softmax_b: by_name("softmax.b"),
            vars,
        }
    }

    fn eps(&self) -> T {
        T::from_f64_lossy(self.config.flags.ln_eps)
    }

    /// One time step of the stack, bottom layer first. Layer `ℓ` consumes
    /// the step-`t` output of layer `ℓ−1` and the step-`t−1` state of
    /// layer `ℓ+1`. Returns the new states and the output embedding.
    pub fn step(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        ids: &[usize],
        prev: &[StepVars],
    ) -> Result<(Vec<StepVars>, Var)> {
        let cfg = &self.config;
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::invalid(
                "forward_sequence",
                format!("character id {bad} >= vocab size {}", cfg.vocab_size),
            ));
        }
        let mut x = tape.embedding(bound.embed, ids)?;
        if let Some(n) = &bound.embed_norm {
            x = tape.layer_norm(x, n.gain, n.bias, self.eps())?;
        }
        let flags = &cfg.flags;
        let top = cfg.layers - 1;
        let mut next: Vec<StepVars> = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let w = &bound.layers[l];
            let above = (l < top && w.v.is_some()).then(|| prev[l + 1].h);
            let s = match cfg.arch {
                Arch::Lstm => {
                    let input = if l == 0 { x } else { next[l - 1].h };
                    cells::lstm_step(tape, input, &prev[l], w, flags)?
                }
                Arch::Hmlstm | Arch::Hmrnn => {
                    let input = if l == 0 {
                        LayerInput::Bottom { x, h_above_prev: above }
                    } else {
                        let below = &next[l - 1];
                        let z_below = below.z.expect("lower layer emits a boundary");
                        if l == top {
                            LayerInput::Top { h_below: below.h, z_below }
                        } else {
                            LayerInput::Middle { h_below: below.h, z_below, h_above_prev: above }
                        }
                    };
                    if cfg.arch == Arch::Hmlstm {
                        cells::hmlstm_step(tape, input, &prev[l], w, flags)?
                    } else {
                        cells::hmrnn_step(tape, input, &prev[l], w, flags)?
                    }
                }
            };
            next.push(s);
        }
        let hs: Vec<Var> = next.iter().map(|s| s.h).collect();
        let he = bound.head.apply(tape, &hs, self.eps())?;
        Ok((next, he))
    }

    /// Runs `steps = ids.len() / batch` characters per row through the
    /// stack. `ids` is batch-major: row `b` is `ids[b·steps..(b+1)·steps]`.
    /// The returned state holds values only; gradients do not flow into it.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        ids: &[usize],
        batch: usize,
        state: &ModelState<T>,
    ) -> Result<ForwardOutput<T>> {
        if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
            return Err(Error::invalid(
                "forward_sequence",
                format!("{} ids do not split into {batch} rows of length >= 1", ids.len()),
            ));
        }
        if state.layers.len() != self.config.layers || state.batch() != batch {
            return Err(Error::invalid(
                "forward_sequence",
                format!(
                    "state has {} layers with batch {}, model needs {} layers with batch {batch}",
                    state.layers.len(),
                    state.batch(),
                    self.config.layers
                ),
            ));
        }
        let steps = ids.len() / batch;
        let mut prev: Vec<StepVars> = state.layers.iter().map(|s| s.bind(tape)).collect();
        let nb = self.config.boundary_layers();
        let mut bits = vec![vec![0u8; batch * steps]; nb];
        let mut outputs = Vec::with_capacity(steps);
        let mut column = vec![0usize; batch];
        for t in 0..steps {
            for (b, slot) in column.iter_mut().enumerate() {
                *slot = ids[b * steps + t];
            }
            let (next, he) = self.step(tape, bound, &column, &prev)?;
            for (l, trace) in bits.iter_mut().enumerate() {
                let z = tape.value(next[l].z.expect("boundary layer"));
                for b in 0..batch {
                    trace[b * steps + t] = u8::from(z.get(b, 0) == T::one());
                }
            }
            outputs.push(he);
            prev = next;
        }
        let he = tape.concat_rows(&outputs)?;
        let proj = tape.matmul(he, bound.softmax_w)?;
        let logits = tape.add(proj, bound.softmax_b)?;
        Ok(ForwardOutput {
            logits,
            boundaries: bits
                .into_iter()
                .map(|bits| BoundaryTrace { batch, steps, bits })
                .collect(),
            state: ModelState {
                layers: prev.iter().map(|s| s.values(tape)).collect(),
            },
            batch,
            steps,
        })
    }

    /// Forward pass on a private tape; returns batch-major logits
    /// `[batch, steps, vocab]`.
    pub fn run(&self, ids: &[usize], batch: usize, state: &ModelState<T>) -> Result<(Tensor<T>, Vec<BoundaryTrace>, ModelState<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_sequence(&mut tape, &bound, ids, batch, state)?;
        let logits = batch_major_logits(tape.value(out.logits), out.batch, out.steps)?;
        Ok((logits, out.boundaries, out.state))
    }
}

fn insert_norm<T: Real>(params: &mut ParamSet<T>, prefix: &str, width: usize) -> Result<()> {
    params.insert(format!("{prefix}.gain"), ParamKind::Gain, Tensor::ones(&[1, width]))?;
    params.insert(format!("{prefix}.bias"), ParamKind::Bias, Tensor::zeros(&[1, width]))?;
    Ok(())
}

/// Reorders time-major `[steps·batch, V]` logits to `[batch, steps, V]`.
pub fn batch_major_logits<T: Real>(logits: &Tensor<T>, batch: usize, steps: usize) -> Result<Tensor<T>> {
    let v = logits.cols();
    if logits.rows() != batch * steps {
        return Err(Error::shape("batch_major_logits", logits.shape(), &[batch * steps, v]));
    }
    let mut data = Vec::with_capacity(logits.len());
    for b in 0..batch {
        for t in 0..steps {
            data.extend_from_slice(logits.row(t * batch + b));
        }
    }
    Tensor::new(vec![batch, steps, v], data)
}

/// Reorders batch-major ids (`[batch, steps]`) to time-major order, the
/// row order of [`ForwardOutput::logits`].
pub fn time_major(ids: &[usize], batch: usize) -> Vec<usize> {
    let steps = ids.len() / batch;
    let mut out = Vec::with_capacity(ids.len());
    for t in 0..steps {
        for b in 0..batch {
            out.push(ids[b * steps + t]);
        }
    }
    out
}
