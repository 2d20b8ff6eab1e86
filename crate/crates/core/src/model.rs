//! Toy bimodal causal transformer.
//!
//! Text ids and projected audio frames share one residual stream with learned
//! absolute positions. Each block is pre-norm: `X = H + attn(norm(H))`, then
//! `H' = X + mamoe(norm(X))`. A final norm feeds both the text LM head and
//! the audio-code head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mamoe::{ExpertPartition, MamoeLayer, RoutingDecision, RoutingEvent};
use crate::numkit::{relative_error, Bound, ParamId, ParamStore, ParamTensor, Segment, Tape, Var};
use crate::stream::{self, Modality, ModalitySequence, PseudoEncoder};

pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: ParamId,
    pub attn: Attention,
    pub moe_norm: ParamId,
    pub moe: MamoeLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: PseudoEncoder,
    pub partition: ExpertPartition,
    pub text_embed: ParamId,
    pub audio_proj: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub text_head: ParamId,
    pub code_head: ParamId,
}

/// Supervised positions of one sequence, as `(position, class)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Targets {
    pub text: Vec<(usize, usize)>,
    pub code: Vec<(usize, usize)>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.text.len() + self.code.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape nodes of a batched forward pass over stacked sequences.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub text_logits: Var,
    pub code_logits: Var,
    /// Mean of the per-layer load-balance losses; a zero constant when no
    /// layer routes.
    pub aux: Var,
    pub layer_aux: Vec<Var>,
    /// `decisions[layer][row]`; inner lists are empty for the dense variant.
    pub decisions: Vec<Vec<RoutingDecision>>,
    pub modalities: Vec<Modality>,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub text_logits: ParamTensor,
    pub code_logits: ParamTensor,
    pub aux_loss: f64,
    pub decisions: Vec<Vec<RoutingDecision>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub aux: Var,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> ParamTensor {
    ParamTensor::randn(shape, std, rng)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let partition = config.partition()?;
        let encoder = PseudoEncoder::new(config.seed, config.d_feat, config.code_vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let w_std = 1.0 / (d as f64).sqrt();

        let text_embed = store.add("embed.text", randn(&mut rng, vec![config.v_text, d], 1.0));
        let audio_proj = store.add(
            "embed.audio_proj",
            randn(&mut rng, vec![config.d_feat, d], (3.0 / config.d_feat as f64).sqrt()),
        );
        let pos_embed = store.add("embed.pos", randn(&mut rng, vec![config.max_pos, d], 0.1));

        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("block{l}");
            let attn_norm = store.add(format!("{p}.attn_norm"), ParamTensor::new(vec![d], vec![1.0; d])?);
            let attn = Attention {
                wq: store.add(format!("{p}.attn.q"), randn(&mut rng, vec![d, d], w_std)),
                wk: store.add(format!("{p}.attn.k"), randn(&mut rng, vec![d, d], w_std)),
                wv: store.add(format!("{p}.attn.v"), randn(&mut rng, vec![d, d], w_std)),
                wo: store.add(format!("{p}.attn.o"), randn(&mut rng, vec![d, d], w_std)),
            };
            let moe_norm = store.add(format!("{p}.moe_norm"), ParamTensor::new(vec![d], vec![1.0; d])?);
            let moe = MamoeLayer::new(
                &mut store,
                &format!("{p}.moe"),
                config.layer_dims(),
                config.router(),
                partition.clone(),
                config.router_init_std,
                &mut rng,
            )?;
            blocks.push(Block {
                attn_norm,
                attn,
                moe_norm,
                moe,
            });
        }
        let final_norm = store.add("final_norm", ParamTensor::new(vec![d], vec![1.0; d])?);
        let text_head = store.add("head.text", randn(&mut rng, vec![d, config.v_text], w_std));
        let code_head = store.add("head.code", randn(&mut rng, vec![d, config.code_vocab], w_std));

        Ok(Self {
            config,
            store,
            encoder,
            partition,
            text_embed,
            audio_proj,
            pos_embed,
            blocks,
            final_norm,
            text_head,
            code_head,
        })
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    fn tape(&self) -> Tape {
        Tape::with_precision(self.config.precision)
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, a: &Attention, x: Var, segments: &[Segment]) -> Result<Var> {
        let q = tape.matmul(x, bound[a.wq])?;
        let k = tape.matmul(x, bound[a.wk])?;
        let v = tape.matmul(x, bound[a.wv])?;
        let o = tape.causal_attention(q, k, v, self.config.n_heads, segments)?;
        tape.matmul(o, bound[a.wo])
    }

    /// One pre-norm block; returns the new stream, its decisions and aux node.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        block: &Block,
        h: Var,
        modalities: &[Modality],
        segments: &[Segment],
    ) -> Result<(Var, Vec<RoutingDecision>, Option<Var>)> {
        let n = tape.rms_norm_rows(h, bound[block.attn_norm], NORM_EPS)?;
        let a = self.attention(tape, bound, &block.attn, n, segments)?;
        let x = tape.add(h, a)?;
        let n = tape.rms_norm_rows(x, bound[block.moe_norm], NORM_EPS)?;
        let out = block.moe.forward(tape, bound, n, modalities)?;
        let y = tape.add(x, out.y)?;
        Ok((y, out.decisions, out.aux))
    }

    /// Forward over sequences stacked row-wise; attention never crosses
    /// sequence boundaries.
    pub fn forward_batch(&self, tape: &mut Tape, bound: &Bound, seqs: &[ModalitySequence]) -> Result<BatchOutput> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch("forward needs at least one sequence".into()));
        }
        let mut segments = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        for s in seqs {
            if s.len() > self.config.max_pos {
                return Err(Error::Argument(format!(
                    "sequence of {} tokens exceeds max_position_embeddings {}",
                    s.len(),
                    self.config.max_pos
                )));
            }
            segments.push(Segment {
                start: tokens.len(),
                len: s.len(),
            });
            tokens.extend_from_slice(s.tokens());
            positions.extend(0..s.len());
        }
        let stacked = ModalitySequence::new(tokens)?;
        let (emb, modalities) = stream::assemble(
            tape,
            &stacked,
            bound[self.text_embed],
            bound[self.audio_proj],
            &self.encoder,
        )?;
        let pos = tape.gather_rows(bound[self.pos_embed], &positions)?;
        let mut h = tape.add(emb, pos)?;

        let mut decisions = Vec::with_capacity(self.blocks.len());
        let mut layer_aux = Vec::new();
        for block in &self.blocks {
            let (y, dec, aux) = self.block_forward(tape, bound, block, h, &modalities, &segments)?;
            h = y;
            decisions.push(dec);
            layer_aux.extend(aux);
        }
        let hn = tape.rms_norm_rows(h, bound[self.final_norm], NORM_EPS)?;
        let text_logits = tape.matmul(hn, bound[self.text_head])?;
        let code_logits = tape.matmul(hn, bound[self.code_head])?;

        let aux = match layer_aux.split_first() {
            None => tape.constant(ParamTensor::scalar(0.0)),
            Some((&first, rest)) => {
                let mut acc = first;
                for &a in rest {
                    acc = tape.add(acc, a)?;
                }
                tape.scale(acc, 1.0 / layer_aux.len() as f64)
            }
        };
        Ok(BatchOutput {
            text_logits,
            code_logits,
            aux,
            layer_aux,
            decisions,
            modalities,
            segments,
        })
    }

    /// Mean token cross-entropy over all supervised positions plus
    /// `alpha · aux`.
    pub fn loss(&self, tape: &mut Tape, out: &BatchOutput, targets: &[Targets], alpha: f64) -> Result<LossParts> {
        if targets.len() != out.segments.len() {
            return Err(Error::shape("loss", &[targets.len()], &[out.segments.len()]));
        }
        let mut text = Vec::new();
        let mut code = Vec::new();
        for (seg, t) in out.segments.iter().zip(targets) {
            for &(pos, class) in &t.text {
                check_pos(pos, seg)?;
                text.push((seg.start + pos, class));
            }
            for &(pos, class) in &t.code {
                check_pos(pos, seg)?;
                code.push((seg.start + pos, class));
            }
        }
        task_loss(tape, out.text_logits, out.code_logits, &text, &code, out.aux, alpha)
    }

    /// Value-only single-sequence forward.
    pub fn forward(&self, seq: &ModalitySequence) -> Result<ForwardOutput> {
        let mut tape = self.tape();
        let bound = self.store.bind(&mut tape);
        let out = self.forward_batch(&mut tape, &bound, std::slice::from_ref(seq))?;
        Ok(ForwardOutput {
            text_logits: tape.value(out.text_logits).clone(),
            code_logits: tape.value(out.code_logits).clone(),
            aux_loss: tape.scalar_value(out.aux),
            decisions: out.decisions,
        })
    }

    /// Builds a fresh tape, runs forward and loss; the caller may call
    /// `backward` on `parts.total`.
    pub fn evaluate(&self, seqs: &[ModalitySequence], targets: &[Targets]) -> Result<Evaluation> {
        let mut tape = self.tape();
        let bound = self.store.bind(&mut tape);
        let out = self.forward_batch(&mut tape, &bound, seqs)?;
        let parts = self.loss(&mut tape, &out, targets, self.config.aux_alpha)?;
        Ok(Evaluation {
            tape,
            bound,
            out,
            parts,
        })
    }
}

fn check_pos(pos: usize, seg: &Segment) -> Result<()> {
    if pos >= seg.len {
        return Err(Error::Argument(format!(
            "target position {pos} outside sequence of length {}",
            seg.len
        )));
    }
    Ok(())
}

/// Mean cross-entropy over text targets (scored on `text_logits`) and code
/// targets (scored on `code_logits`), plus `alpha · aux`.
pub fn task_loss(
    tape: &mut Tape,
    text_logits: Var,
    code_logits: Var,
    text_targets: &[(usize, usize)],
    code_targets: &[(usize, usize)],
    aux: Var,
    alpha: f64,
) -> Result<LossParts> {
    let n = text_targets.len() + code_targets.len();
    if n == 0 {
        return Err(Error::EmptyBatch("no supervised positions".into()));
    }
    let mut terms = Vec::with_capacity(2);
    if !text_targets.is_empty() {
        terms.push(tape.cross_entropy_sum(text_logits, text_targets)?);
    }
    if !code_targets.is_empty() {
        terms.push(tape.cross_entropy_sum(code_logits, code_targets)?);
    }
    let sum = match terms.as_slice() {
        [a] => *a,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("at least one target list is non-empty"),
    };
    let ce = tape.scale(sum, 1.0 / n as f64);
    let scaled = tape.scale(aux, alpha);
    let total = tape.add(ce, scaled)?;
    Ok(LossParts { total, ce, aux })
}

pub struct Evaluation {
    pub tape: Tape,
    pub bound: Bound,
    pub out: BatchOutput,
    pub parts: LossParts,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.tape.scalar_value(self.parts.total)
    }

    pub fn ce(&self) -> f64 {
        self.tape.scalar_value(self.parts.ce)
    }

    pub fn aux(&self) -> f64 {
        self.tape.scalar_value(self.parts.aux)
    }

    pub fn routing(&self) -> Vec<Vec<Vec<usize>>> {
        self.out
            .decisions
            .iter()
            .map(|layer| layer.iter().map(|d| d.indices.clone()).collect())
            .collect()
    }

    /// Routing events of this pass, token indices counted over stacked rows.
    pub fn events(&self, step: u64) -> Vec<RoutingEvent> {
        let mut events = Vec::new();
        for (layer, decs) in self.out.decisions.iter().enumerate() {
            for (t, d) in decs.iter().enumerate() {
                events.push(RoutingEvent {
                    step,
                    layer,
                    token_index: t,
                    modality: self.out.modalities[t],
                    selected: d.indices.clone(),
                    weights: d.weights.clone(),
                });
            }
        }
        events
    }
}

/// Coarse parameter family used for gradient-check reporting.
pub fn param_group(name: &str) -> &'static str {
    let tail = name.split_once('.').map_or(name, |(_, t)| t);
    if name.starts_with("embed.") {
        match tail {
            "text" => "text_embedding",
            "audio_proj" => "audio_projection",
            _ => "position_embedding",
        }
    } else if name.starts_with("head.") {
        "heads"
    } else if name.ends_with("norm") {
        "norms"
    } else if tail.starts_with("attn.") {
        "attention"
    } else if tail.ends_with(".router") {
        "router"
    } else if tail.contains(".shared.") {
        "shared_expert"
    } else if tail.contains(".dense.") {
        "dense_mlp"
    } else {
        "routed_experts"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradReport {
    pub groups: Vec<GroupReport>,
    /// Perturbations that changed some token's selected expert set.
    pub routing_flips: usize,
    pub coords_checked: usize,
}

impl ModelGradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

const MIN_FD_STEP: f64 = 1e-7;

/// Five-point central-difference check of the full training loss against
/// the tape.
///
/// At most `max_coords` evenly spaced coordinates of each parameter tensor
/// are probed (`None` probes all). Every probe re-runs routing; where a step
/// changes any selected set it is retried ten times smaller, and a flip is
/// counted only if the smallest step still changes routing.
pub fn model_grad_check(
    model: &Model,
    seqs: &[ModalitySequence],
    targets: &[Targets],
    eps: f64,
    max_coords: Option<usize>,
) -> Result<ModelGradReport> {
    if !(MIN_FD_STEP..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut base = model.evaluate(seqs, targets)?;
    base.tape.backward(base.parts.total)?;
    let routing = base.routing();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            base.tape
                .grad(base.bound[id])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; model.store.get(id).len()])
        })
        .collect();
    drop(base);

    let mut probe = model.clone();
    let mut groups: Vec<GroupReport> = Vec::new();
    let mut flips = 0;
    let mut total = 0;
    for (pi, &id) in ids.iter().enumerate() {
        let name = model.store.name(id).to_string();
        let len = model.store.get(id).len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < len => (0..m).map(|j| j * len / m).collect(),
            _ => (0..len).collect(),
        };
        let group = param_group(&name);
        let gi = match groups.iter().position(|g| g.group == group) {
            Some(i) => i,
            None => {
                groups.push(GroupReport {
                    group: group.to_string(),
                    max_rel_err: 0.0,
                    worst_param: String::new(),
                    coords_checked: 0,
                });
                groups.len() - 1
            }
        };
        for &c in &coords {
            let orig = model.store.get(id).data()[c];
            let mut at = |offset: f64| -> Result<(f64, bool)> {
                probe.store.get_mut(id).data_mut()[c] = orig + offset;
                let ev = probe.evaluate(seqs, targets)?;
                Ok((ev.total(), ev.routing() == routing))
            };
            // shrink the step until no probe changes the selected experts
            let mut h = eps;
            let numeric = loop {
                let (l2p, s2p) = at(2.0 * h)?;
                let (l1p, s1p) = at(h)?;
                let (l1m, s1m) = at(-h)?;
                let (l2m, s2m) = at(-2.0 * h)?;
                if ![l2p, l1p, l1m, l2m].iter().all(|l| l.is_finite()) {
                    return Err(Error::NonFinite { tensor: name.clone() });
                }
                let stable = s2p && s1p && s1m && s2m;
                if stable || h / 10.0 < MIN_FD_STEP {
                    if !stable {
                        flips += 1;
                    }
                    break (8.0 * (l1p - l1m) - (l2p - l2m)) / (12.0 * h);
                }
                h /= 10.0;
            };
            probe.store.get_mut(id).data_mut()[c] = orig;
            let err = relative_error(analytic[pi][c], numeric);
            let g = &mut groups[gi];
            if err > g.max_rel_err {
                g.max_rel_err = err;
                g.worst_param = format!("{name}[{c}]");
            }
            g.coords_checked += 1;
            total += 1;
        }
    }
    Ok(ModelGradReport {
        groups,
        routing_flips: flips,
        coords_checked: total,
    })
}

#[cfg(test)]
mod tests;
