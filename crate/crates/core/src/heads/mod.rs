//! Regression heads and the two-head ensemble model.
//!
//! A [`Model`] owns one [`TrackProjection`] (per-modality linear layers over
//! the raw backbone embeddings) and one or two heads. Every head reads the
//! same projected vectors:
//!
//! * `cls_w`, `cls_m`: concatenation over modalities of the projected CLS tracks
//! * `a_w`, `a_m`: same for the mutated-position tracks
//! * `avg_w`, `avg_m`: the average-pool track, projected with the sequence layer
//!
//! All forward passes run on a [`GradTape`], so prediction and training share
//! a single code path.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingBundle, TrackRole, TrackSet};
use crate::error::{Error, Result};
use crate::math::{GradTape, NodeId, ParamBinding, ParamId, ParamStore};

pub const DEFAULT_LAYERNORM_EPS: f64 = 1e-5;

/// Regression-head architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Flattened `a_m ⊗ a_w`, linear to width d, then a scalar output layer.
    Head1Outer,
    /// `LN(cls_w - cls_m) ⊕ LN(a_w - a_m)`, then a scalar output layer.
    Head2LnDiff,
    /// `a_w ⊕ a_m` into a scalar output layer.
    MutConcat,
    /// Learned mix `α·a_w + β·a_m` into a scalar output layer.
    MutLinComb,
    /// Learned mix of the CLS vectors.
    ClsLinComb,
    /// Learned mix of the average-pool vectors.
    AvgPoolLinComb,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Head1Outer,
        HeadKind::Head2LnDiff,
        HeadKind::MutConcat,
        HeadKind::MutLinComb,
        HeadKind::ClsLinComb,
        HeadKind::AvgPoolLinComb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Head1Outer => "head1",
            HeadKind::Head2LnDiff => "head2",
            HeadKind::MutConcat => "mut-concat",
            HeadKind::MutLinComb => "mut-lincomb",
            HeadKind::ClsLinComb => "cls-lincomb",
            HeadKind::AvgPoolLinComb => "avg-lincomb",
        }
    }

    fn needs(self) -> Inputs {
        match self {
            HeadKind::Head1Outer | HeadKind::MutConcat | HeadKind::MutLinComb => Inputs::POS,
            HeadKind::Head2LnDiff => Inputs::CLS.union(Inputs::POS),
            HeadKind::ClsLinComb => Inputs::CLS,
            HeadKind::AvgPoolLinComb => Inputs::AVG,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = HeadKind::ALL.iter().map(|k| k.name()).collect();
                Error::config(format!("unknown head '{s}', expected one of {}", names.join(", ")))
            })
    }
}

/// Either the two-head ensemble or one head trained alone. Serialized as
/// `"ensemble"` or a head name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    Ensemble,
    Single(HeadKind),
}

impl Architecture {
    pub fn heads(self) -> Vec<HeadKind> {
        match self {
            Architecture::Ensemble => vec![HeadKind::Head1Outer, HeadKind::Head2LnDiff],
            Architecture::Single(k) => vec![k],
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            Ok(Architecture::Ensemble)
        } else {
            s.parse().map(Architecture::Single)
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Ensemble => f.write_str("ensemble"),
            Architecture::Single(k) => k.fmt(f),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// One learned `d_raw -> d_proj` linear layer per modality.
    Learned,
    /// Raw embeddings pass through unchanged (`d_proj = d_raw`), no parameters.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Inputs(u8);

impl Inputs {
    const CLS: Inputs = Inputs(1);
    const POS: Inputs = Inputs(2);
    const AVG: Inputs = Inputs(4);

    const fn union(self, o: Inputs) -> Inputs {
        Inputs(self.0 | o.0)
    }

    fn has(self, o: Inputs) -> bool {
        self.0 & o.0 != 0
    }
}

/// Static description of a model; everything needed to rebuild its
/// parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub tracks: TrackSet,
    pub projection: ProjectionMode,
    pub d_raw: usize,
    pub d_proj: usize,
    pub layernorm_eps: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_raw == 0 {
            return Err(Error::config("d_raw must be positive"));
        }
        if self.d_proj == 0 {
            return Err(Error::config("d_proj must be positive"));
        }
        if self.projection == ProjectionMode::Identity && self.d_proj != self.d_raw {
            return Err(Error::config(format!(
                "identity projection needs d_proj = d_raw, got {} and {}",
                self.d_proj, self.d_raw
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::config("layernorm eps must be positive"));
        }
        Ok(())
    }

    fn modalities(&self) -> &'static [(TrackRole, TrackRole)] {
        match self.tracks {
            TrackSet::Seq => &[(TrackRole::SeqCls, TrackRole::SeqPos)],
            TrackSet::SeqStruct => &[
                (TrackRole::SeqCls, TrackRole::SeqPos),
                (TrackRole::StructCls, TrackRole::StructPos),
            ],
        }
    }

    /// Width of the fused cls / position vectors.
    pub fn fused_width(&self) -> usize {
        self.modalities().len() * self.d_proj
    }

    fn needs(&self) -> Inputs {
        self.architecture
            .heads()
            .into_iter()
            .fold(Inputs(0), |acc, k| acc.union(k.needs()))
    }

    /// Bundle tracks the model reads.
    pub fn required_roles(&self) -> Vec<TrackRole> {
        let needs = self.needs();
        let mut roles = Vec::new();
        for &(cls, pos) in self.modalities() {
            if needs.has(Inputs::CLS) {
                roles.push(cls);
            }
            if needs.has(Inputs::POS) {
                roles.push(pos);
            }
        }
        if needs.has(Inputs::AVG) {
            roles.push(TrackRole::Avg);
        }
        roles.sort();
        roles
    }
}

/// Per-modality linear layers applied to raw embeddings before fusion.
#[derive(Clone, Debug)]
pub struct TrackProjection {
    /// `(weight, bias)` per modality, sequence first. Empty for identity.
    layers: Vec<(ParamId, ParamId)>,
}

/// Parameter handles of one head.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub kind: HeadKind,
    kernel: Kernel,
    /// Output layer `N`: `1 x in_width` weight and a scalar bias.
    pub out_w: ParamId,
    pub out_b: ParamId,
    in_width: usize,
}

#[derive(Clone, Debug)]
enum Kernel {
    Outer { w: ParamId, b: ParamId },
    LnDiff { cls: (ParamId, ParamId), pos: (ParamId, ParamId) },
    Concat,
    LinComb { alpha: ParamId, beta: ParamId },
}

impl HeadParams {
    /// All parameter ids owned by this head, in creation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match &self.kernel {
            Kernel::Outer { w, b } => vec![*w, *b],
            Kernel::LnDiff { cls, pos } => vec![cls.0, cls.1, pos.0, pos.1],
            Kernel::Concat => vec![],
            Kernel::LinComb { alpha, beta } => vec![*alpha, *beta],
        };
        ids.extend([self.out_w, self.out_b]);
        ids
    }

    /// Width of the vector fed to the output layer.
    pub fn feature_width(&self) -> usize {
        self.in_width
    }
}

/// Projected, fused inputs as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedValues {
    pub cls_w: Option<Vec<f64>>,
    pub cls_m: Option<Vec<f64>>,
    pub a_w: Option<Vec<f64>>,
    pub a_m: Option<Vec<f64>>,
    pub avg_w: Option<Vec<f64>>,
    pub avg_m: Option<Vec<f64>>,
}

/// Tape nodes for the fused inputs of one sample.
#[derive(Clone, Copy, Debug, Default)]
pub struct FusedNodes {
    pub cls_w: Option<NodeId>,
    pub cls_m: Option<NodeId>,
    pub a_w: Option<NodeId>,
    pub a_m: Option<NodeId>,
    pub avg_w: Option<NodeId>,
    pub avg_m: Option<NodeId>,
}

/// Tape nodes for one sample's predictions.
#[derive(Clone, Debug)]
pub struct SampleNodes {
    pub heads: Vec<NodeId>,
    pub ensemble: NodeId,
}

/// Head outputs and their mean for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub heads: Vec<f64>,
    pub ensemble: f64,
}

/// Named intermediate values of one head's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub stages: Vec<(&'static str, Vec<f64>)>,
    pub output: f64,
}

impl HeadTrace {
    pub fn stage(&self, name: &str) -> Option<&[f64]> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, v)| v.as_slice())
    }
}

/// Projection plus one or two regression heads.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    projection: TrackProjection,
    heads: Vec<HeadParams>,
}

/// The two-head model of the main architecture.
pub type EnsembleModel = Model;

fn uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

impl Model {
    /// Builds a model with seeded initialization: linear weights uniform in
    /// `±1/sqrt(fan_in)`, biases zero, LayerNorm `gamma = 1, beta = 0`, and
    /// mixing scalars `α = 1, β = -1`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (d_raw, d_proj) = (spec.d_raw, spec.d_proj);

        let mut layers = Vec::new();
        if spec.projection == ProjectionMode::Learned {
            for (i, _) in spec.modalities().iter().enumerate() {
                let name = if i == 0 { "seq" } else { "struct" };
                let w = params.add(format!("proj.{name}.w"), d_proj, d_raw, uniform(&mut rng, d_proj * d_raw, d_raw));
                let b = params.add(format!("proj.{name}.b"), d_proj, 1, vec![0.0; d_proj]);
                layers.push((w, b));
            }
        }

        let d = spec.fused_width();
        let mut heads = Vec::new();
        for kind in spec.architecture.heads() {
            let p = kind.name();
            let (kernel, in_width) = match kind {
                HeadKind::Head1Outer => {
                    let w = params.add(format!("{p}.w"), d, d * d, uniform(&mut rng, d * d * d, d * d));
                    let b = params.add(format!("{p}.w_bias"), d, 1, vec![0.0; d]);
                    (Kernel::Outer { w, b }, d)
                }
                HeadKind::Head2LnDiff => {
                    let mut ln = |which: &str| {
                        (
                            params.add(format!("{p}.ln_{which}.gamma"), d, 1, vec![1.0; d]),
                            params.add(format!("{p}.ln_{which}.beta"), d, 1, vec![0.0; d]),
                        )
                    };
                    let cls = ln("cls");
                    let pos = ln("pos");
                    (Kernel::LnDiff { cls, pos }, 2 * d)
                }
                HeadKind::MutConcat => (Kernel::Concat, 2 * d),
                HeadKind::MutLinComb | HeadKind::ClsLinComb | HeadKind::AvgPoolLinComb => {
                    let alpha = params.add(format!("{p}.alpha"), 1, 1, vec![1.0]);
                    let beta = params.add(format!("{p}.beta"), 1, 1, vec![-1.0]);
                    let width = if kind == HeadKind::AvgPoolLinComb { d_proj } else { d };
                    (Kernel::LinComb { alpha, beta }, width)
                }
            };
            let out_w = params.add(format!("{p}.out.w"), 1, in_width, uniform(&mut rng, in_width, in_width));
            let out_b = params.add(format!("{p}.out.b"), 1, 1, vec![0.0]);
            heads.push(HeadParams {
                kind,
                kernel,
                out_w,
                out_b,
                in_width,
            });
        }

        Ok(Model {
            spec,
            params,
            projection: TrackProjection { layers },
            heads,
        })
    }

    /// Rebuilds a model from a spec and stored parameters, checking that
    /// names and shapes match the layout the spec implies.
    pub fn from_parts(spec: ModelSpec, params: ParamStore) -> Result<Model> {
        let mut model = Model::new(spec, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::data(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(params.iter()) {
            if want.name != got.name || want.rows != got.rows || want.cols != got.cols || got.data.len() != got.rows * got.cols {
                return Err(Error::data(format!(
                    "parameter '{}' ({}x{}) does not match expected '{}' ({}x{})",
                    got.name, got.rows, got.cols, want.name, want.rows, want.cols
                )));
            }
            if got.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("parameter '{}' holds non-finite values", got.name)));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn heads(&self) -> &[HeadParams] {
        &self.heads
    }

    pub fn projection(&self) -> &TrackProjection {
        &self.projection
    }

    /// Scalar parameter counts per component (`projection`, then each head)
    /// followed by the total.
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        let count = |ids: &[ParamId]| ids.iter().map(|&i| self.params.get(i).len()).sum::<usize>();
        let proj: Vec<ParamId> = self.projection.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        let mut out = vec![("projection".to_string(), count(&proj))];
        for h in &self.heads {
            out.push((h.kind.name().to_string(), count(&h.param_ids())));
        }
        out.push(("total".to_string(), self.params.element_count()));
        out
    }

    /// Checks that both bundles carry the same track set, including every
    /// role the model reads, at the model's raw width.
    pub fn check_bundles(&self, wt: &EmbeddingBundle, mt: &EmbeddingBundle) -> Result<()> {
        for role in self.spec.required_roles() {
            for b in [wt, mt] {
                b.track(role)?;
            }
        }
        for (a, b) in [(wt, mt), (mt, wt)] {
            if let Some(role) = a.tracks.keys().find(|r| !b.tracks.contains_key(r)) {
                return Err(Error::data(format!(
                    "track-set mismatch: '{}' has {role} but '{}' is missing it",
                    a.variant_id, b.variant_id
                )));
            }
        }
        for b in [wt, mt] {
            let d = b.d_raw()?;
            if d != self.spec.d_raw {
                return Err(Error::data(format!(
                    "bundle '{}' has width {d}, model expects {}",
                    b.variant_id, self.spec.d_raw
                )));
            }
        }
        Ok(())
    }

    fn project(&self, tape: &mut GradTape, bind: &mut ParamBinding, modality: usize, raw: Vec<f64>) -> Result<NodeId> {
        let x = tape.leaf(raw);
        match self.projection.layers.get(modality) {
            None => Ok(x),
            Some(&(w, b)) => {
                let wn = bind.node(tape, &self.params, w);
                let bn = bind.node(tape, &self.params, b);
                tape.linear(x, wn, bn, self.spec.d_proj, self.spec.d_raw)
            }
        }
    }

    fn fuse_role(
        &self,
        tape: &mut GradTape,
        bind: &mut ParamBinding,
        bundle: &EmbeddingBundle,
        pick: fn(&(TrackRole, TrackRole)) -> TrackRole,
    ) -> Result<NodeId> {
        let mut parts = Vec::new();
        for (i, pair) in self.spec.modalities().iter().enumerate() {
            parts.push(self.project(tape, bind, i, bundle.track_f64(pick(pair))?)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat(&parts)
        }
    }

    /// Records projection and fusion of a wild-type / mutant bundle pair.
    pub fn fuse_on_tape(
        &self,
        tape: &mut GradTape,
        bind: &mut ParamBinding,
        wt: &EmbeddingBundle,
        mt: &EmbeddingBundle,
    ) -> Result<FusedNodes> {
        self.check_bundles(wt, mt)?;
        let needs = self.spec.needs();
        let mut out = FusedNodes::default();
        if needs.has(Inputs::CLS) {
            out.cls_w = Some(self.fuse_role(tape, bind, wt, |p| p.0)?);
            out.cls_m = Some(self.fuse_role(tape, bind, mt, |p| p.0)?);
        }
        if needs.has(Inputs::POS) {
            out.a_w = Some(self.fuse_role(tape, bind, wt, |p| p.1)?);
            out.a_m = Some(self.fuse_role(tape, bind, mt, |p| p.1)?);
        }
        if needs.has(Inputs::AVG) {
            out.avg_w = Some(self.project(tape, bind, 0, wt.track_f64(TrackRole::Avg)?)?);
            out.avg_m = Some(self.project(tape, bind, 0, mt.track_f64(TrackRole::Avg)?)?);
        }
        Ok(out)
    }

    /// Records one head's forward pass on already-fused inputs. Returns the
    /// output node and the named intermediates.
    pub fn head_on_tape(
        &self,
        tape: &mut GradTape,
        bind: &mut ParamBinding,
        head: usize,
        x: &FusedNodes,
    ) -> Result<(NodeId, Vec<(&'static str, NodeId)>)> {
        let h = self.heads.get(head).ok_or_else(|| Error::config(format!("no head at index {head}")))?;
        let need = |n: Option<NodeId>, what: &str| {
            n.ok_or_else(|| Error::data(format!("{} head needs {what} inputs", h.kind)))
        };
        let d = self.spec.fused_width();
        let mut stages = Vec::new();
        let features = match &h.kernel {
            Kernel::Outer { w, b } => {
                let (a_w, a_m) = (need(x.a_w, "position")?, need(x.a_m, "position")?);
                let outer = tape.outer(a_m, a_w)?;
                let wn = bind.node(tape, &self.params, *w);
                let bn = bind.node(tape, &self.params, *b);
                let hidden = tape.linear(outer, wn, bn, d, d * d)?;
                stages.push(("outer", outer));
                stages.push(("hidden", hidden));
                hidden
            }
            Kernel::LnDiff { cls, pos } => {
                let (cls_w, cls_m) = (need(x.cls_w, "cls")?, need(x.cls_m, "cls")?);
                let (a_w, a_m) = (need(x.a_w, "position")?, need(x.a_m, "position")?);
                let dc = tape.sub(cls_w, cls_m)?;
                let da = tape.sub(a_w, a_m)?;
                let (gc, bc) = (bind.node(tape, &self.params, cls.0), bind.node(tape, &self.params, cls.1));
                let (ga, ba) = (bind.node(tape, &self.params, pos.0), bind.node(tape, &self.params, pos.1));
                let lc = tape.layernorm(dc, gc, bc, self.spec.layernorm_eps)?;
                let la = tape.layernorm(da, ga, ba, self.spec.layernorm_eps)?;
                let feat = tape.concat(&[lc, la])?;
                stages.extend([("cls_diff", dc), ("pos_diff", da), ("features", feat)]);
                feat
            }
            Kernel::Concat => {
                let feat = tape.concat(&[need(x.a_w, "position")?, need(x.a_m, "position")?])?;
                stages.push(("features", feat));
                feat
            }
            Kernel::LinComb { alpha, beta } => {
                let (xw, xm) = match h.kind {
                    HeadKind::MutLinComb => (need(x.a_w, "position")?, need(x.a_m, "position")?),
                    HeadKind::ClsLinComb => (need(x.cls_w, "cls")?, need(x.cls_m, "cls")?),
                    _ => (need(x.avg_w, "avg")?, need(x.avg_m, "avg")?),
                };
                let an = bind.node(tape, &self.params, *alpha);
                let bn = bind.node(tape, &self.params, *beta);
                let sw = tape.mul_scalar(xw, an)?;
                let sm = tape.mul_scalar(xm, bn)?;
                let feat = tape.add(sw, sm)?;
                stages.push(("features", feat));
                feat
            }
        };
        let ow = bind.node(tape, &self.params, h.out_w);
        let ob = bind.node(tape, &self.params, h.out_b);
        let y = tape.linear(features, ow, ob, 1, h.in_width)?;
        Ok((y, stages))
    }

    /// Records the full forward pass for one sample.
    pub fn sample_on_tape(
        &self,
        tape: &mut GradTape,
        bind: &mut ParamBinding,
        wt: &EmbeddingBundle,
        mt: &EmbeddingBundle,
    ) -> Result<SampleNodes> {
        let fused = self.fuse_on_tape(tape, bind, wt, mt)?;
        let mut heads = Vec::with_capacity(self.heads.len());
        for i in 0..self.heads.len() {
            heads.push(self.head_on_tape(tape, bind, i, &fused)?.0);
        }
        let ensemble = if heads.len() == 1 {
            heads[0]
        } else {
            let sum = tape.add(heads[0], heads[1])?;
            tape.scale(sum, 0.5)?
        };
        Ok(SampleNodes { heads, ensemble })
    }

    /// Projected, fused vectors for a bundle pair.
    pub fn project_and_fuse(&self, wt: &EmbeddingBundle, mt: &EmbeddingBundle) -> Result<FusedValues> {
        let mut tape = GradTape::new();
        let mut bind = ParamBinding::new(&self.params);
        let n = self.fuse_on_tape(&mut tape, &mut bind, wt, mt)?;
        let v = |id: Option<NodeId>| id.map(|id| tape.value(id).to_vec());
        Ok(FusedValues {
            cls_w: v(n.cls_w),
            cls_m: v(n.cls_m),
            a_w: v(n.a_w),
            a_m: v(n.a_m),
            avg_w: v(n.avg_w),
            avg_m: v(n.avg_m),
        })
    }

    /// Runs one head on given fused vectors and reports its intermediates.
    pub fn trace_head(&self, head: usize, inputs: &FusedValues) -> Result<HeadTrace> {
        let mut tape = GradTape::new();
        let mut bind = ParamBinding::new(&self.params);
        let leaf = |tape: &mut GradTape, v: &Option<Vec<f64>>| v.as_ref().map(|v| tape.leaf(v.clone()));
        let nodes = FusedNodes {
            cls_w: leaf(&mut tape, &inputs.cls_w),
            cls_m: leaf(&mut tape, &inputs.cls_m),
            a_w: leaf(&mut tape, &inputs.a_w),
            a_m: leaf(&mut tape, &inputs.a_m),
            avg_w: leaf(&mut tape, &inputs.avg_w),
            avg_m: leaf(&mut tape, &inputs.avg_m),
        };
        self.check_widths(head, inputs)?;
        let (y, stages) = self.head_on_tape(&mut tape, &mut bind, head, &nodes)?;
        Ok(HeadTrace {
            stages: stages.into_iter().map(|(n, id)| (n, tape.value(id).to_vec())).collect(),
            output: tape.scalar(y),
        })
    }

    fn check_widths(&self, head: usize, x: &FusedValues) -> Result<()> {
        let h = self.heads.get(head).ok_or_else(|| Error::config(format!("no head at index {head}")))?;
        let d = self.spec.fused_width();
        let pairs: Vec<(&Option<Vec<f64>>, usize)> = match h.kind {
            HeadKind::AvgPoolLinComb => vec![(&x.avg_w, self.spec.d_proj), (&x.avg_m, self.spec.d_proj)],
            HeadKind::ClsLinComb => vec![(&x.cls_w, d), (&x.cls_m, d)],
            HeadKind::Head2LnDiff => vec![(&x.cls_w, d), (&x.cls_m, d), (&x.a_w, d), (&x.a_m, d)],
            _ => vec![(&x.a_w, d), (&x.a_m, d)],
        };
        for (v, want) in pairs {
            if let Some(v) = v {
                if v.len() != want {
                    return Err(Error::config(format!(
                        "{} head expects inputs of width {want}, got {}",
                        h.kind,
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Prediction of one head on fused vectors.
    pub fn head_predict(&self, head: usize, inputs: &FusedValues) -> Result<f64> {
        Ok(self.trace_head(head, inputs)?.output)
    }

    /// Every head's prediction for a bundle pair, and their mean.
    pub fn predict(&self, wt: &EmbeddingBundle, mt: &EmbeddingBundle) -> Result<Prediction> {
        let mut tape = GradTape::new();
        let mut bind = ParamBinding::new(&self.params);
        let s = self.sample_on_tape(&mut tape, &mut bind, wt, mt)?;
        let heads: Vec<f64> = s.heads.iter().map(|&h| tape.scalar(h)).collect();
        let ensemble = tape.scalar(s.ensemble);
        if let Some(bad) = heads.iter().chain([&ensemble]).find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite prediction {bad} for '{}'",
                mt.variant_id
            )));
        }
        Ok(Prediction { heads, ensemble })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: Architecture, tracks: TrackSet, d_raw: usize, d_proj: usize) -> ModelSpec {
        ModelSpec {
            architecture: arch,
            tracks,
            projection: ProjectionMode::Learned,
            d_raw,
            d_proj,
            layernorm_eps: DEFAULT_LAYERNORM_EPS,
        }
    }

    fn bundle(id: &str, roles: &[TrackRole], d: usize, offset: f32) -> EmbeddingBundle {
        let mut b = EmbeddingBundle::new(id);
        for (k, &r) in roles.iter().enumerate() {
            b.tracks.insert(r, (0..d).map(|i| (i as f32 * 0.3 + k as f32 + offset).sin()).collect());
        }
        b
    }

    #[test]
    fn fused_widths_follow_track_count() {
        let m = Model::new(spec(Architecture::Ensemble, TrackSet::Seq, 12, 8), 1).unwrap();
        let roles = TrackSet::Seq.roles();
        let f = m.project_and_fuse(&bundle("w", roles, 12, 0.0), &bundle("m", roles, 12, 1.0)).unwrap();
        assert_eq!(f.cls_w.unwrap().len(), 8);
        assert_eq!(f.a_m.unwrap().len(), 8);
        assert!(f.avg_w.is_none());

        let m = Model::new(spec(Architecture::Ensemble, TrackSet::SeqStruct, 12, 8), 1).unwrap();
        let roles = TrackSet::SeqStruct.roles();
        let f = m.project_and_fuse(&bundle("w", roles, 12, 0.0), &bundle("m", roles, 12, 1.0)).unwrap();
        assert_eq!(f.cls_w.unwrap().len(), 16);
        assert_eq!(f.a_w.unwrap().len(), 16);
    }

    #[test]
    fn identity_projection_passes_raw_vectors() {
        let mut s = spec(Architecture::Single(HeadKind::MutConcat), TrackSet::Seq, 5, 5);
        s.projection = ProjectionMode::Identity;
        let m = Model::new(s, 0).unwrap();
        let roles = TrackSet::Seq.roles();
        let (w, mt) = (bundle("w", roles, 5, 0.0), bundle("m", roles, 5, 2.0));
        let f = m.project_and_fuse(&w, &mt).unwrap();
        assert_eq!(f.a_w.unwrap(), w.track_f64(TrackRole::SeqPos).unwrap());
        assert_eq!(f.a_m.unwrap(), mt.track_f64(TrackRole::SeqPos).unwrap());
        assert_eq!(m.parameter_counts()[0].1, 0);
    }

    #[test]
    fn missing_track_is_named() {
        let m = Model::new(spec(Architecture::Ensemble, TrackSet::SeqStruct, 4, 4), 0).unwrap();
        let w = bundle("P:WT", TrackSet::SeqStruct.roles(), 4, 0.0);
        let mt = bundle("P:A1C", TrackSet::Seq.roles(), 4, 0.0);
        let err = m.predict(&w, &mt).unwrap_err().to_string();
        assert!(err.contains("struct_cls") && err.contains("P:A1C"), "{err}");
    }

    #[test]
    fn extra_track_on_one_side_is_a_mismatch() {
        let m = Model::new(spec(Architecture::Single(HeadKind::MutConcat), TrackSet::Seq, 4, 4), 0).unwrap();
        let w = bundle("P:WT", &[TrackRole::SeqPos, TrackRole::Avg], 4, 0.0);
        let mt = bundle("P:A1C", &[TrackRole::SeqPos], 4, 0.0);
        let err = m.predict(&w, &mt).unwrap_err().to_string();
        assert!(err.contains("mismatch") && err.contains("avg"), "{err}");
    }

    #[test]
    fn parameter_counts_disclose_head_sizes() {
        let m = Model::new(spec(Architecture::Ensemble, TrackSet::Seq, 6, 4), 0).unwrap();
        let counts = m.parameter_counts();
        assert_eq!(counts[0], ("projection".into(), 4 * 6 + 4));
        assert_eq!(counts[1], ("head1".into(), 4 * 16 + 4 + 4 + 1));
        assert_eq!(counts[2], ("head2".into(), 4 * 4 + 8 + 1));
        assert_eq!(counts[3].1, counts[0].1 + counts[1].1 + counts[2].1);
    }

    #[test]
    fn head_names_parse() {
        for k in HeadKind::ALL {
            assert_eq!(k.name().parse::<HeadKind>().unwrap(), k);
        }
        assert_eq!("ensemble".parse::<Architecture>().unwrap(), Architecture::Ensemble);
        assert!("head3".parse::<HeadKind>().is_err());
    }

    #[test]
    fn from_parts_rejects_wrong_layout() {
        let a = Model::new(spec(Architecture::Ensemble, TrackSet::Seq, 6, 4), 0).unwrap();
        let b = Model::new(spec(Architecture::Ensemble, TrackSet::Seq, 6, 3), 0).unwrap();
        assert!(Model::from_parts(a.spec().clone(), b.params().clone()).is_err());
        let back = Model::from_parts(a.spec().clone(), a.params().clone()).unwrap();
        assert_eq!(back.params(), a.params());
    }
}
