//! Modality-aware mixture-of-experts layer.
//!
//! Routed experts are split into a text group and an audio group. Each token
//! scores all experts with one softmax, zeroes the scores outside its own
//! modality's group, keeps the top-K survivors, and sums their outputs
//! weighted by the (unrenormalized) masked scores. A shared expert sees every
//! token and is added on top.

mod events;
mod loss;
mod partition;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use events::{read_events, write_events, EventReader, RoutingEvent};
pub use loss::{balance_groups, load_balance_loss, BalanceGroup};
pub use partition::ExpertPartition;

use crate::error::{Error, Result};
use crate::numkit::{self, Bound, ParamId, ParamStore, ParamTensor, Tape, Var};
use crate::stream::Modality;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Modality-masked routing plus a shared expert.
    #[default]
    Mamoe,
    /// All tokens compete for all experts; shared expert kept.
    Vanilla,
    /// Modality-masked routing without a shared expert.
    NoShared,
    /// One MLP sized to the active parameter count of the sparse path.
    Dense,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mamoe => "mamoe",
            Variant::Vanilla => "vanilla",
            Variant::NoShared => "no_shared",
            Variant::Dense => "dense",
        }
    }

    pub fn masked(self) -> bool {
        matches!(self, Variant::Mamoe | Variant::NoShared)
    }

    pub fn has_router(self) -> bool {
        self != Variant::Dense
    }

    pub fn has_shared(self) -> bool {
        matches!(self, Variant::Mamoe | Variant::Vanilla | Variant::Dense)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mamoe" => Ok(Variant::Mamoe),
            "vanilla" => Ok(Variant::Vanilla),
            "no_shared" => Ok(Variant::NoShared),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::Argument(format!(
                "unknown variant `{other}` (expected mamoe, vanilla, no_shared, dense)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub k: usize,
    pub variant: Variant,
    pub aux_alpha: f64,
    #[serde(default)]
    pub renormalize_topk: bool,
}

impl RouterConfig {
    pub fn new(k: usize, variant: Variant) -> Self {
        Self {
            k,
            variant,
            aux_alpha: 0.001,
            renormalize_topk: false,
        }
    }

    pub fn validate(&self, part: &ExpertPartition) -> Result<()> {
        if self.variant == Variant::Dense {
            return Ok(());
        }
        let limit = if self.variant.masked() {
            part.text().len().min(part.audio().len())
        } else {
            part.n_experts()
        };
        if self.k == 0 || self.k > limit {
            return Err(Error::Config(format!(
                "K={} must lie in 1..={limit} for variant {}",
                self.k, self.variant
            )));
        }
        if !(self.aux_alpha >= 0.0 && self.aux_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "aux_alpha must be a nonnegative number, got {}",
                self.aux_alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, highest score first.
    pub indices: Vec<usize>,
    /// Gate weight per selected expert.
    pub weights: Vec<f64>,
    pub masked_scores: Vec<f64>,
    pub raw_scores: Vec<f64>,
}

/// `softmax(h · W_g)` for one token.
pub fn gate_scores(h: &[f64], w_g: &ParamTensor) -> Result<Vec<f64>> {
    let (d, n) = w_g.dims2();
    if h.len() != d {
        return Err(Error::shape("gate_scores", &[h.len()], w_g.shape()));
    }
    let mut logits = vec![0.0; n];
    for (i, hv) in h.iter().enumerate() {
        for (l, w) in logits.iter_mut().zip(w_g.row(i)) {
            *l += hv * w;
        }
    }
    numkit::softmax_in_place(&mut logits);
    Ok(logits)
}

/// 1 for experts in the token's modality group, 0 elsewhere.
pub fn build_mask(modality: Modality, part: &ExpertPartition) -> Vec<f64> {
    let mut mask = vec![0.0; part.n_experts()];
    for &i in part.group(modality) {
        mask[i] = 1.0;
    }
    mask
}

/// Applies `mask` to `raw` and selects the top `k` experts among `candidates`
/// (ascending expert ids whose mask entry is 1).
pub fn select_experts(
    raw: Vec<f64>,
    mask: &[f64],
    candidates: &[usize],
    k: usize,
    renormalize: bool,
) -> Result<RoutingDecision> {
    if mask.len() != raw.len() {
        return Err(Error::shape("select_experts", &[raw.len()], &[mask.len()]));
    }
    let masked: Vec<f64> = raw.iter().zip(mask).map(|(s, m)| s * m).collect();
    let cand_scores: Vec<f64> = candidates.iter().map(|&i| masked[i]).collect();
    let (pos, mut weights) = numkit::topk(&cand_scores, k)?;
    let indices: Vec<usize> = pos.into_iter().map(|p| candidates[p]).collect();
    if renormalize {
        let s: f64 = weights.iter().sum();
        if s > 0.0 {
            weights.iter_mut().for_each(|w| *w /= s);
        }
    }
    Ok(RoutingDecision {
        indices,
        weights,
        masked_scores: masked,
        raw_scores: raw,
    })
}

/// Modality-aware routing of a single token.
pub fn route(
    h: &[f64],
    modality: Modality,
    w_g: &ParamTensor,
    part: &ExpertPartition,
    k: usize,
) -> Result<RoutingDecision> {
    let raw = gate_scores(h, w_g)?;
    if raw.len() != part.n_experts() {
        return Err(Error::shape("route", &[raw.len()], &[part.n_experts()]));
    }
    select_experts(raw, &build_mask(modality, part), part.group(modality), k, false)
}

/// Modality-agnostic top-K routing.
pub fn route_unmasked(h: &[f64], w_g: &ParamTensor, k: usize) -> Result<RoutingDecision> {
    let raw = gate_scores(h, w_g)?;
    let all: Vec<usize> = (0..raw.len()).collect();
    select_experts(raw, &vec![1.0; all.len()], &all, k, false)
}

/// Gated MLP: `down(silu(h·gate) ⊙ (h·up))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expert {
    pub gate_w: ParamId,
    pub up_w: ParamId,
    pub down_w: ParamId,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        let in_std = 1.0 / (d_model as f64).sqrt();
        let out_std = 1.0 / (d_ff as f64).sqrt();
        Self {
            gate_w: store.add(
                format!("{prefix}.gate"),
                ParamTensor::randn(vec![d_model, d_ff], in_std, rng),
            ),
            up_w: store.add(
                format!("{prefix}.up"),
                ParamTensor::randn(vec![d_model, d_ff], in_std, rng),
            ),
            down_w: store.add(
                format!("{prefix}.down"),
                ParamTensor::randn(vec![d_ff, d_model], out_std, rng),
            ),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.gate_w, self.up_w, self.down_w]
    }

    pub fn d_ff(&self, store: &ParamStore) -> usize {
        store.get(self.gate_w).cols()
    }

    /// Taped forward over a `[rows × d_model]` block.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let a = tape.matmul(x, bound[self.gate_w])?;
        let b = tape.matmul(x, bound[self.up_w])?;
        let a = tape.silu(a);
        let hmid = tape.mul(a, b)?;
        tape.matmul(hmid, bound[self.down_w])
    }
}

/// Single-token expert evaluation without a tape.
pub fn expert_forward(store: &ParamStore, e: &Expert, h: &[f64]) -> Result<Vec<f64>> {
    let x = ParamTensor::matrix(1, h.len(), h.to_vec())?;
    let a = numkit::matmul(&x, store.get(e.gate_w))?;
    let b = numkit::matmul(&x, store.get(e.up_w))?;
    let hmid: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&a, &b)| numkit::silu(a) * b)
        .collect();
    let hmid = ParamTensor::matrix(1, hmid.len(), hmid)?;
    Ok(numkit::matmul(&hmid, store.get(e.down_w))?.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub d_model: usize,
    pub n_experts: usize,
    pub d_ff: usize,
    pub shared_d_ff: usize,
}

impl LayerDims {
    /// Hidden width of the dense variant: the active sparse path holds `k`
    /// routed experts plus the shared one, each with `3 · d_model · d_ff`
    /// weights, so matching widths match parameter counts exactly.
    pub fn dense_d_ff(&self, k: usize) -> usize {
        k * self.d_ff + self.shared_d_ff
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MamoeLayer {
    pub config: RouterConfig,
    pub partition: ExpertPartition,
    pub router: Option<ParamId>,
    pub experts: Vec<Expert>,
    pub shared: Option<Expert>,
    d_model: usize,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub y: Var,
    /// Routed contribution, absent for the dense variant.
    pub routed: Option<Var>,
    pub shared: Option<Var>,
    /// Per token, in row order; empty for the dense variant.
    pub decisions: Vec<RoutingDecision>,
    /// Load-balance loss node; absent for the dense variant.
    pub aux: Option<Var>,
}

impl MamoeLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: LayerDims,
        config: RouterConfig,
        partition: ExpertPartition,
        router_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if partition.n_experts() != dims.n_experts {
            return Err(Error::Config(format!(
                "partition covers {} experts, layer has {}",
                partition.n_experts(),
                dims.n_experts
            )));
        }
        config.validate(&partition)?;
        let variant = config.variant;
        let router = variant.has_router().then(|| {
            store.add(
                format!("{prefix}.router"),
                ParamTensor::randn(vec![dims.d_model, dims.n_experts], router_std, rng),
            )
        });
        let experts = if variant.has_router() {
            (0..dims.n_experts)
                .map(|i| {
                    Expert::new(store, &format!("{prefix}.expert{i}"), dims.d_model, dims.d_ff, rng)
                })
                .collect()
        } else {
            Vec::new()
        };
        let shared = match variant {
            Variant::Dense => Some(Expert::new(
                store,
                &format!("{prefix}.dense"),
                dims.d_model,
                dims.dense_d_ff(config.k),
                rng,
            )),
            v if v.has_shared() => Some(Expert::new(
                store,
                &format!("{prefix}.shared"),
                dims.d_model,
                dims.shared_d_ff,
                rng,
            )),
            _ => None,
        };
        Ok(Self {
            config,
            partition,
            router,
            experts,
            shared,
            d_model: dims.d_model,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Routes one token using this layer's router and variant.
    pub fn route_token(
        &self,
        store: &ParamStore,
        h: &[f64],
        modality: Modality,
    ) -> Result<Option<RoutingDecision>> {
        let Some(router) = self.router else {
            return Ok(None);
        };
        let raw = gate_scores(h, store.get(router))?;
        self.decide(raw, modality).map(Some)
    }

    fn decide(&self, raw: Vec<f64>, modality: Modality) -> Result<RoutingDecision> {
        let renorm = self.config.renormalize_topk;
        if self.config.variant.masked() {
            let mask = build_mask(modality, &self.partition);
            select_experts(raw, &mask, self.partition.group(modality), self.config.k, renorm)
        } else {
            let all: Vec<usize> = (0..raw.len()).collect();
            select_experts(raw, &vec![1.0; all.len()], &all, self.config.k, renorm)
        }
    }

    /// Taped forward over `[L × d_model]` with one modality per row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        modalities: &[Modality],
    ) -> Result<LayerOutput> {
        let (rows, d) = tape.value(h).dims2();
        if modalities.len() != rows {
            return Err(Error::shape("mamoe_forward", &[rows], &[modalities.len()]));
        }
        if d != self.d_model {
            return Err(Error::shape("mamoe_forward", tape.value(h).shape(), &[rows, self.d_model]));
        }

        let shared = match &self.shared {
            Some(e) => Some(e.forward_tape(tape, bound, h)?),
            None => None,
        };

        let Some(router) = self.router else {
            let y = shared.expect("dense variant carries its MLP in the shared slot");
            return Ok(LayerOutput {
                y,
                routed: None,
                shared: None,
                decisions: Vec::new(),
                aux: None,
            });
        };

        let logits = tape.matmul(h, bound[router])?;
        let scores = tape.softmax_rows(logits);
        let decisions = {
            let sv = tape.value(scores);
            (0..rows)
                .map(|t| self.decide(sv.row(t).to_vec(), modalities[t]))
                .collect::<Result<Vec<_>>>()?
        };

        let k = self.config.k;
        // gate weights stay differentiable; the selection itself is not
        let weight_source = if self.config.renormalize_topk {
            let coords: Vec<(usize, usize)> = decisions
                .iter()
                .enumerate()
                .flat_map(|(t, dec)| dec.indices.iter().map(move |&i| (t, i)))
                .collect();
            let picked = tape.select(scores, &coords, (rows, k))?;
            Some(tape.normalize_rows(picked)?)
        } else {
            None
        };

        let mut routed: Option<Var> = None;
        for (e_idx, expert) in self.experts.iter().enumerate() {
            let mut token_rows = Vec::new();
            let mut coords = Vec::new();
            for (t, dec) in decisions.iter().enumerate() {
                if let Some(slot) = dec.indices.iter().position(|&i| i == e_idx) {
                    token_rows.push(t);
                    coords.push(match weight_source {
                        Some(_) => (t, slot),
                        None => (t, e_idx),
                    });
                }
            }
            if token_rows.is_empty() {
                continue;
            }
            let w = tape.select(weight_source.unwrap_or(scores), &coords, (coords.len(), 1))?;
            let x = tape.gather_rows(h, &token_rows)?;
            let out = expert.forward_tape(tape, bound, x)?;
            let out = tape.scale_rows(out, w)?;
            let out = tape.scatter_rows(out, &token_rows, rows)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        let routed = match routed {
            Some(r) => r,
            None => tape.constant(ParamTensor::zeros(vec![rows, d])),
        };

        let y = match shared {
            Some(s) => tape.add(routed, s)?,
            None => routed,
        };

        let aux = if rows > 0 {
            Some(loss::load_balance_tape(
                tape,
                scores,
                &decisions,
                modalities,
                &self.partition,
                self.config.variant,
                k,
            )?)
        } else {
            None
        };

        Ok(LayerOutput {
            y,
            routed: Some(routed),
            shared,
            decisions,
            aux,
        })
    }
}
