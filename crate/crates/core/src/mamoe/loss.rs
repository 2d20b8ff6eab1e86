//! Per-group load-balancing penalty.
//!
//! For a group `g` of `n_g` experts and the tokens routed within it,
//! `L_g = n_g · Σ_i f_i · P_i`, where `f_i` is the share of the group's
//! top-K slots taken by expert `i` and `P_i` is the mean of the token's gate
//! scores renormalized over the group. The layer loss averages `L_g` over
//! the groups that received tokens. Only `P` carries gradient.

use super::{ExpertPartition, RoutingDecision, Variant};
use crate::error::{Error, Result};
use crate::numkit::{Tape, Var};
use crate::stream::Modality;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BalanceGroup {
    /// Tokens of this modality compete in the group; `None` means all tokens.
    pub modality: Option<Modality>,
    pub experts: Vec<usize>,
}

pub fn balance_groups(variant: Variant, part: &ExpertPartition) -> Vec<BalanceGroup> {
    match variant {
        Variant::Dense => Vec::new(),
        Variant::Vanilla => vec![BalanceGroup {
            modality: None,
            experts: (0..part.n_experts()).collect(),
        }],
        Variant::Mamoe | Variant::NoShared => Modality::ALL
            .iter()
            .map(|&m| BalanceGroup {
                modality: Some(m),
                experts: part.group(m).to_vec(),
            })
            .collect(),
    }
}

fn group_tokens(group: &BalanceGroup, modalities: &[Modality]) -> Vec<usize> {
    modalities
        .iter()
        .enumerate()
        .filter(|(_, &m)| group.modality.is_none_or(|g| g == m))
        .map(|(t, _)| t)
        .collect()
}

/// Slot share `f_i` of each group expert over the group's tokens.
fn slot_fractions(
    group: &BalanceGroup,
    tokens: &[usize],
    decisions: &[RoutingDecision],
    k: usize,
) -> Vec<f64> {
    let denom = (k * tokens.len()) as f64;
    group
        .experts
        .iter()
        .map(|&e| {
            let hits = tokens
                .iter()
                .filter(|&&t| decisions[t].indices.contains(&e))
                .count();
            hits as f64 / denom
        })
        .collect()
}

fn check_batch(decisions: &[RoutingDecision], modalities: &[Modality]) -> Result<()> {
    if decisions.is_empty() {
        return Err(Error::EmptyBatch("load-balance loss needs at least one token".into()));
    }
    if decisions.len() != modalities.len() {
        return Err(Error::shape(
            "load_balance_loss",
            &[decisions.len()],
            &[modalities.len()],
        ));
    }
    Ok(())
}

/// Value of the load-balance loss computed from logged routing decisions.
pub fn load_balance_loss(
    decisions: &[RoutingDecision],
    modalities: &[Modality],
    part: &ExpertPartition,
    variant: Variant,
    k: usize,
) -> Result<f64> {
    check_batch(decisions, modalities)?;
    let mut total = 0.0;
    let mut present = 0usize;
    for group in balance_groups(variant, part) {
        let tokens = group_tokens(&group, modalities);
        if tokens.is_empty() {
            continue;
        }
        let f = slot_fractions(&group, &tokens, decisions, k);
        let mut p = vec![0.0; group.experts.len()];
        for &t in &tokens {
            let s = &decisions[t].masked_scores;
            let mass: f64 = group.experts.iter().map(|&e| s[e]).sum();
            if mass <= 0.0 {
                return Err(Error::Argument(format!(
                    "token {t} has no score mass on its expert group"
                )));
            }
            for (pi, &e) in p.iter_mut().zip(&group.experts) {
                *pi += s[e] / mass;
            }
        }
        let n = tokens.len() as f64;
        let dot: f64 = f.iter().zip(&p).map(|(fi, pi)| fi * pi / n).sum();
        total += group.experts.len() as f64 * dot;
        present += 1;
    }
    Ok(if present == 0 { 0.0 } else { total / present as f64 })
}

/// Taped version over the layer's `[L × N]` softmax score node.
pub(super) fn load_balance_tape(
    tape: &mut Tape,
    scores: Var,
    decisions: &[RoutingDecision],
    modalities: &[Modality],
    part: &ExpertPartition,
    variant: Variant,
    k: usize,
) -> Result<Var> {
    check_batch(decisions, modalities)?;
    let mut terms = Vec::new();
    for group in balance_groups(variant, part) {
        let tokens = group_tokens(&group, modalities);
        if tokens.is_empty() {
            continue;
        }
        let f = slot_fractions(&group, &tokens, decisions, k);
        let rows = tape.gather_rows(scores, &tokens)?;
        let sub = tape.select_cols(rows, &group.experts)?;
        let renorm = tape.normalize_rows(sub)?;
        let p = tape.mean_rows(renorm)?;
        let dot = tape.dot_const(p, &f)?;
        terms.push(tape.scale(dot, group.experts.len() as f64));
    }
    let n = terms.len();
    let mut acc = terms
        .pop()
        .ok_or_else(|| Error::EmptyBatch("no routed tokens".into()))?;
    while let Some(t) = terms.pop() {
        acc = tape.add(t, acc)?;
    }
    Ok(tape.scale(acc, 1.0 / n as f64))
}
