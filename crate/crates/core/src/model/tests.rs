use super::*;
use crate::mamoe::Variant;
use crate::stream::ModalityToken::{AudioCode, Text};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        n_experts: 4,
        k: 2,
        d_ff: 4,
        shared_d_ff: 4,
        v_text: 8,
        code_vocab: 8,
        d_feat: 4,
        max_pos: 8,
        variant,
        audio_expert_indices: vec![2, 3],
        seed: 3,
        ..ModelConfig::default()
    }
}

fn mixed() -> ModalitySequence {
    ModalitySequence::new(vec![Text(1), AudioCode(5), AudioCode(2), Text(7), Text(0), AudioCode(3)]).unwrap()
}

fn mixed_targets() -> Targets {
    Targets {
        text: vec![(0, 3), (3, 1), (4, 6)],
        code: vec![(1, 2), (2, 7), (5, 0)],
    }
}

const VARIANTS: [Variant; 4] = [Variant::Mamoe, Variant::Vanilla, Variant::NoShared, Variant::Dense];

fn zero(model: &mut Model, name: &str) {
    let id = model.store.find(name).unwrap_or_else(|| panic!("no param {name}"));
    model.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
}

#[test]
fn logits_have_vocab_shapes() {
    for v in VARIANTS {
        let m = Model::new(tiny(v)).unwrap();
        let out = m.forward(&mixed()).unwrap();
        assert_eq!(out.text_logits.shape(), &[6, 8]);
        assert_eq!(out.code_logits.shape(), &[6, 8]);
        assert_eq!(out.decisions.len(), 2);
        assert!(out.text_logits.is_finite() && out.code_logits.is_finite());
    }
}

#[test]
fn construction_is_deterministic() {
    let a = Model::new(tiny(Variant::Mamoe)).unwrap();
    let b = Model::new(tiny(Variant::Mamoe)).unwrap();
    for ((na, ta), (nb, tb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta.data(), tb.data());
    }
    let fa = a.forward(&mixed()).unwrap();
    let fb = b.forward(&mixed()).unwrap();
    assert_eq!(fa.text_logits.data(), fb.text_logits.data());
    assert_eq!(fa.aux_loss.to_bits(), fb.aux_loss.to_bits());
    let mut other = tiny(Variant::Mamoe);
    other.seed = 4;
    let c = Model::new(other).unwrap();
    assert_ne!(c.forward(&mixed()).unwrap().text_logits.data(), fa.text_logits.data());
}

#[test]
fn earlier_logits_ignore_later_tokens() {
    for v in VARIANTS {
        let m = Model::new(tiny(v)).unwrap();
        let base = m.forward(&mixed()).unwrap();
        let mut toks = mixed().tokens().to_vec();
        toks[4] = Text(2);
        toks[5] = AudioCode(6);
        let changed = m.forward(&ModalitySequence::new(toks).unwrap()).unwrap();
        let w = 8;
        assert_eq!(&base.text_logits.data()[..4 * w], &changed.text_logits.data()[..4 * w]);
        assert_eq!(&base.code_logits.data()[..4 * w], &changed.code_logits.data()[..4 * w]);
        assert_ne!(&base.text_logits.data()[4 * w..], &changed.text_logits.data()[4 * w..]);
    }
}

#[test]
fn stacked_sequences_do_not_interact() {
    let m = Model::new(tiny(Variant::Mamoe)).unwrap();
    let a = mixed();
    let b = ModalitySequence::new(vec![AudioCode(1), Text(4), Text(4)]).unwrap();
    let mut tape = Tape::new();
    let bound = m.store.bind(&mut tape);
    let out = m.forward_batch(&mut tape, &bound, &[a.clone(), b.clone()]).unwrap();
    let both = tape.value(out.text_logits).data().to_vec();
    let fa = m.forward(&a).unwrap();
    let fb = m.forward(&b).unwrap();
    let sep: Vec<f64> = fa.text_logits.data().iter().chain(fb.text_logits.data()).copied().collect();
    for (x, y) in both.iter().zip(&sep) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn single_token_matches_direct_computation() {
    // one token: attention is the value path, routing is per token
    let mut cfg = tiny(Variant::Mamoe);
    cfg.n_layers = 0;
    let m = Model::new(cfg).unwrap();
    let seq = ModalitySequence::new(vec![Text(5)]).unwrap();
    let out = m.forward(&seq).unwrap();
    assert_eq!(out.aux_loss, 0.0);
    assert!(out.decisions.is_empty());

    let d = 8;
    let e = m.store.get(m.text_embed).row(5);
    let p = m.store.get(m.pos_embed).row(0);
    let h: Vec<f64> = e.iter().zip(p).map(|(a, b)| a + b).collect();
    let rms = (h.iter().map(|x| x * x).sum::<f64>() / d as f64 + NORM_EPS).sqrt();
    let g = m.store.get(m.final_norm).data();
    let hn: Vec<f64> = h.iter().zip(g).map(|(x, g)| x / rms * g).collect();
    let head = m.store.get(m.text_head);
    for j in 0..8 {
        let want: f64 = (0..d).map(|i| hn[i] * head.get(i, j)).sum();
        assert!((out.text_logits.get(0, j) - want).abs() < 1e-12);
    }
}

#[test]
fn blocks_with_zero_output_projections_are_identity() {
    for v in VARIANTS {
        let mut m = Model::new(tiny(v)).unwrap();
        let names: Vec<String> = m
            .store
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.ends_with("attn.o") || n.ends_with(".down"))
            .collect();
        assert!(!names.is_empty());
        for n in &names {
            zero(&mut m, n);
        }
        let mut flat = tiny(v);
        flat.n_layers = 0;
        let mut bare = Model::new(flat).unwrap();
        for name in ["embed.text", "embed.audio_proj", "embed.pos", "final_norm", "head.text", "head.code"] {
            let src = m.store.get(m.store.find(name).unwrap()).clone();
            let id = bare.store.find(name).unwrap();
            *bare.store.get_mut(id) = src;
        }
        let a = m.forward(&mixed()).unwrap();
        let b = bare.forward(&mixed()).unwrap();
        assert_eq!(a.text_logits.data(), b.text_logits.data(), "{v}");
        assert_eq!(a.code_logits.data(), b.code_logits.data(), "{v}");
    }
}

#[test]
fn single_modality_input_stays_in_its_group() {
    let m = Model::new(tiny(Variant::Mamoe)).unwrap();
    let text = ModalitySequence::new((0..6).map(Text).collect()).unwrap();
    let audio = ModalitySequence::new((0..6).map(AudioCode).collect()).unwrap();
    for (seq, group) in [(text, [0, 1]), (audio, [2, 3])] {
        for layer in m.forward(&seq).unwrap().decisions {
            for d in layer {
                let mut idx = d.indices.clone();
                idx.sort();
                assert_eq!(idx, group);
            }
        }
    }
}

#[test]
fn aux_is_mean_over_layers() {
    let m = Model::new(tiny(Variant::Mamoe)).unwrap();
    let mut tape = Tape::new();
    let bound = m.store.bind(&mut tape);
    let out = m.forward_batch(&mut tape, &bound, &[mixed()]).unwrap();
    assert_eq!(out.layer_aux.len(), 2);
    let per: Vec<f64> = out.layer_aux.iter().map(|&a| tape.scalar_value(a)).collect();
    let want = (per[0] + per[1]) / 2.0;
    assert!((tape.scalar_value(out.aux) - want).abs() < 1e-15);
    assert!(per.iter().all(|&a| a >= 1.0 - 1e-12));

    let dense = Model::new(tiny(Variant::Dense)).unwrap();
    assert_eq!(dense.forward(&mixed()).unwrap().aux_loss, 0.0);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut cfg = tiny(Variant::Mamoe);
    cfg.code_vocab = 16;
    cfg.aux_alpha = 0.0;
    let mut m = Model::new(cfg).unwrap();
    zero(&mut m, "head.text");
    zero(&mut m, "head.code");
    let ev = m.evaluate(&[mixed()], &[mixed_targets()]).unwrap();
    let want = (3.0 * 8f64.ln() + 3.0 * 16f64.ln()) / 6.0;
    assert!((ev.ce() - want).abs() < 1e-12);
    assert_eq!(ev.total(), ev.ce());
}

#[test]
fn mixed_cross_entropy_by_hand() {
    let mut tape = Tape::new();
    let text = tape.constant(ParamTensor::new(vec![3, 2], vec![0.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
    let code = tape.constant(ParamTensor::new(vec![3, 3], vec![0.0; 9]).unwrap());
    let aux = tape.constant(ParamTensor::scalar(1.5));
    let parts = task_loss(&mut tape, text, code, &[(0, 0), (1, 0)], &[(2, 1)], aux, 0.1).unwrap();
    // ln 2, ln(1 + e^-2), ln 3 averaged over the three positions
    let want = (2f64.ln() + (1.0 + (-2f64).exp()).ln() + 3f64.ln()) / 3.0;
    assert!((tape.scalar_value(parts.ce) - want).abs() < 1e-14);
    assert!((tape.scalar_value(parts.total) - (want + 0.15)).abs() < 1e-14);

    let aux0 = tape.constant(ParamTensor::scalar(3.0));
    let p0 = task_loss(&mut tape, text, code, &[(0, 0), (1, 0)], &[(2, 1)], aux0, 0.0).unwrap();
    assert_eq!(tape.scalar_value(p0.total), tape.scalar_value(p0.ce));
    assert!(matches!(
        task_loss(&mut tape, text, code, &[], &[], aux, 0.1),
        Err(Error::EmptyBatch(_))
    ));
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = Model::new(tiny(Variant::Mamoe)).unwrap();
    let long = ModalitySequence::new((0..9).map(|i| Text(i % 8)).collect()).unwrap();
    assert!(matches!(m.forward(&long), Err(Error::Argument(_))));
    let bad = Targets {
        text: vec![(6, 0)],
        code: vec![],
    };
    assert!(m.evaluate(&[mixed()], &[bad]).is_err());
    assert!(m.evaluate(&[], &[]).is_err());
    assert!(m.evaluate(&[mixed()], &[]).is_err());
    let mut cfg = tiny(Variant::Mamoe);
    cfg.n_heads = 3;
    assert!(Model::new(cfg).is_err());
}

#[test]
fn param_groups_cover_every_tensor() {
    for v in VARIANTS {
        let m = Model::new(tiny(v)).unwrap();
        let groups: std::collections::BTreeSet<&str> = m.store.iter().map(|(n, _)| param_group(n)).collect();
        let mut want = vec!["attention", "audio_projection", "heads", "norms", "position_embedding", "text_embedding"];
        match v {
            Variant::Dense => want.push("dense_mlp"),
            Variant::NoShared => want.extend(["router", "routed_experts"]),
            _ => want.extend(["router", "routed_experts", "shared_expert"]),
        }
        want.sort();
        assert_eq!(groups.into_iter().collect::<Vec<_>>(), want, "{v}");
    }
    assert_eq!(param_group("block0.moe.router"), "router");
    assert_eq!(param_group("block1.moe.shared.up"), "shared_expert");
    assert_eq!(param_group("block1.moe.expert3.gate"), "routed_experts");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for v in VARIANTS {
        let m = Model::new(tiny(v)).unwrap();
        let r = model_grad_check(&m, &[mixed()], &[mixed_targets()], 1e-3, None).unwrap();
        assert_eq!(r.routing_flips, 0, "{v}");
        assert_eq!(r.coords_checked, m.n_params());
        for g in &r.groups {
            assert!(g.max_rel_err < 1e-4, "{v} {}: {} at {}", g.group, g.max_rel_err, g.worst_param);
        }
    }
}
