use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::perturb::TargetSelector;
use crate::synthdata::{ANS, CLS, END, PAD};

fn model(seed: u64, decoder: bool) -> MultiModalModel {
    MultiModalModel::new(ModelConfig::default(), decoder, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn image(seed: u64) -> Vec<f64> {
    (0..64)
        .map(|i| ((i as u64 * 7 + seed * 13) % 10) as f64 / 10.0)
        .collect()
}

fn image_out(m: &MultiModalModel, imgs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
    let (cls, tokens) = net.encode_image(&refs).unwrap();
    (tape.value(cls).into_data(), tape.value(tokens).into_data())
}

fn text_cls(m: &MultiModalModel, seqs: &[Vec<usize>]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let enc = net.encode_text(seqs).unwrap();
    tape.value(enc.cls).into_data()
}

fn fused(m: &MultiModalModel, img: &[f64], text: &[usize], image_attention: bool) -> Vec<f64> {
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let (_, tokens) = net.encode_image(&[img]).unwrap();
    let enc = net.encode_text(&[text.to_vec()]).unwrap();
    let f = net.fuse(tokens, &enc, image_attention).unwrap();
    tape.value(f).into_data()
}

fn decoder_logits(m: &MultiModalModel, prefix: &[usize]) -> Vec<f64> {
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let (_, tokens) = net.encode_image(&[&image(3)]).unwrap();
    let enc = net.encode_text(&[vec![CLS, 10, 11, 12]]).unwrap();
    let f = net.fuse(tokens, &enc, true).unwrap();
    let logits = net.decode_answer(f, &enc.valid, &[prefix.to_vec()]).unwrap();
    tape.value(logits).into_data()
}

#[test]
fn identical_images_give_identical_embeddings() {
    let m = model(1, false);
    let (cls, tokens) = image_out(&m, &[image(1), image(1)]);
    let d = m.config.width;
    assert_eq!(cls[..d], cls[d..]);
    let half = tokens.len() / 2;
    assert_eq!(tokens[..half], tokens[half..]);
}

#[test]
fn zero_image_is_finite() {
    let m = model(2, false);
    let (cls, tokens) = image_out(&m, &[vec![0.0; 64]]);
    assert!(cls.iter().chain(&tokens).all(|x| x.is_finite()));
}

#[test]
fn swapping_two_patches_changes_the_summary() {
    let m = model(3, false);
    let img = image(5);
    let mut swapped = img.clone();
    // patch 0 covers rows 0..2, cols 0..2; patch 1 covers rows 0..2, cols 2..4
    for r in 0..2 {
        for c in 0..2 {
            swapped.swap(r * 8 + c, r * 8 + c + 2);
        }
    }
    assert_ne!(img, swapped);
    let (a, _) = image_out(&m, &[img]);
    let (b, _) = image_out(&m, &[swapped]);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn wrong_image_size_is_an_error() {
    let m = model(4, false);
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    assert!(net.encode_image(&[&[0.0; 63]]).is_err());
    assert!(net.encode_image(&[]).is_err());
}

#[test]
fn padding_does_not_change_the_text_summary() {
    let m = model(5, false);
    let seq = vec![CLS, 10, 20, 15];
    let plain = text_cls(&m, &[seq.clone()]);
    let mut padded = seq.clone();
    padded.extend([PAD; 6]);
    assert_eq!(plain, text_cls(&m, &[padded]));
    // padding introduced by batching with a longer sequence
    let batched = text_cls(&m, &[seq, vec![CLS, 10, 20, 15, 16, 17, 18, 19]]);
    assert_eq!(plain[..], batched[..m.config.width]);
}

#[test]
fn one_token_difference_changes_the_text_summary() {
    let m = model(6, false);
    let a = text_cls(&m, &[vec![CLS, 10, 20, 15]]);
    let b = text_cls(&m, &[vec![CLS, 10, 21, 15]]);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    assert_eq!(a, text_cls(&m, &[vec![CLS, 10, 20, 15]]));
}

#[test]
fn text_range_checks() {
    let m = model(7, false);
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    assert!(net.encode_text(&[vec![CLS, m.config.vocab_size]]).is_err());
    assert!(net.encode_text(&[vec![CLS; m.config.max_text_len + 2]]).is_err());
    assert!(net.encode_text(&[vec![CLS; m.config.max_text_len + 1]]).is_ok());
}

#[test]
fn fusion_attends_to_the_image() {
    let m = model(8, false);
    let text = [CLS, 10, 11, 12];
    let a = fused(&m, &image(1), &text, true);
    let b = fused(&m, &image(2), &text, true);
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    assert_eq!(a, fused(&m, &image(1), &text, true));
}

#[test]
fn blocked_image_attention_reduces_to_text_only() {
    let m = model(9, false);
    let text = [CLS, 10, 11, 12];
    let a = fused(&m, &image(1), &text, false);
    let b = fused(&m, &image(2), &text, false);
    assert_eq!(a, b);
    assert_eq!(a, fused(&m, &vec![0.0; 64], &text, false));
}

#[test]
fn fuse_rejects_batch_mismatch() {
    let m = model(10, false);
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let (_, tokens) = net.encode_image(&[&image(1), &image(2)]).unwrap();
    let enc = net.encode_text(&[vec![CLS, 10]]).unwrap();
    assert!(net.fuse(tokens, &enc, true).is_err());
}

#[test]
fn decoder_is_causal() {
    let m = model(11, true);
    let v = m.config.vocab_size;
    let a = decoder_logits(&m, &[ANS, 10, 11, 12]);
    let b = decoder_logits(&m, &[ANS, 10, 30, 12]);
    // positions 0 and 1 precede the change at position 2
    assert_eq!(a[..2 * v], b[..2 * v]);
    assert!(a[2 * v..].iter().zip(&b[2 * v..]).any(|(x, y)| (x - y).abs() > 1e-9));
    assert_eq!(a, decoder_logits(&m, &[ANS, 10, 11, 12]));
}

#[test]
fn decoder_prefix_rules() {
    let m = model(12, true);
    let tape = Tape::new();
    let bound = m.params.bind_constant(&tape);
    let net = Net::new(&tape, &bound, &m.config);
    let (_, tokens) = net.encode_image(&[&image(1)]).unwrap();
    let enc = net.encode_text(&[vec![CLS, 10]]).unwrap();
    let f = net.fuse(tokens, &enc, true).unwrap();
    assert!(net.decode_answer(f, &enc.valid, &[vec![10, 11]]).is_err());
    assert!(net.decode_answer(f, &enc.valid, &[vec![ANS; 9]]).is_err());
    let ok = net.decode_answer(f, &enc.valid, &[vec![ANS, 10, END]]).unwrap();
    assert_eq!(tape.shape(ok), vec![1, 3, m.config.vocab_size]);
}

#[test]
fn momentum_identity_and_full_copy() {
    let mut live = model(13, false);
    let mut copies = MomentumCopies::from_live(&live.params, 1.0).unwrap();
    let before = copies.clone();
    for (_, t) in live.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 1.0);
    }
    copies.update(&live.params).unwrap();
    assert_eq!(copies, before);

    copies.momentum = 0.0;
    copies.update(&live.params).unwrap();
    for (name, t) in copies.params.iter() {
        assert_eq!(t, live.params.get(name).unwrap());
    }
}

#[test]
fn momentum_lags_by_m_times_delta() {
    let mut live = model(14, false);
    let mut copies = MomentumCopies::from_live(&live.params, 0.995).unwrap();
    let delta = 0.3;
    for (_, t) in live.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += delta);
    }
    copies.update(&live.params).unwrap();
    for (name, t) in copies.params.iter() {
        for (c, l) in t.data().iter().zip(live.params.get(name).unwrap().data()) {
            assert!((l - c - 0.995 * delta).abs() < 1e-12);
        }
    }
}

#[test]
fn momentum_distance_is_non_increasing() {
    let live = model(15, false);
    let other = model(16, false);
    let mut copies = MomentumCopies::from_live(&other.params, 0.9).unwrap();
    let dist = |c: &MomentumCopies| -> f64 {
        c.params
            .iter()
            .flat_map(|(n, t)| {
                let l = live.params.get(n).unwrap();
                t.data()
                    .iter()
                    .zip(l.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut last = dist(&copies);
    for _ in 0..20 {
        copies.update(&live.params).unwrap();
        let d = dist(&copies);
        assert!(d <= last);
        last = d;
    }
}

#[test]
fn momentum_mirrors_only_the_encoders_and_projections() {
    let live = model(17, true);
    let copies = MomentumCopies::from_live(&live.params, 0.995).unwrap();
    assert!(copies.params.names().all(|n| n.starts_with("visual.")
        || n.starts_with("text.")
        || n.starts_with("img_proj.")
        || n.starts_with("txt_proj.")));
    assert!(copies.params.contains("txt_proj.weight"));
    assert!(!copies.params.contains("fusion.ln_final.gamma"));
}

#[test]
fn momentum_structural_mismatch_is_an_error() {
    let live = model(18, false);
    let mut copies = MomentumCopies::from_live(&live.params, 0.995).unwrap();
    let mut broken = live.params.clone();
    broken.remove("visual.cls");
    assert!(copies.update(&broken).is_err());
    let mut reshaped = live.params.clone();
    reshaped.insert("visual.cls", Tensor::zeros(vec![2, 32]));
    assert!(copies.update(&reshaped).is_err());
    assert!(MomentumCopies::from_live(&live.params, 1.5).is_err());
}

#[test]
fn momentum_features_are_unit_norm() {
    let live = model(19, false);
    let copies = MomentumCopies::from_live(&live.params, 0.995).unwrap();
    let (img, txt) = copies
        .features(
            &live.config,
            &[&image(1), &image(2)],
            &[vec![CLS, 10], vec![CLS, 11, 12]],
        )
        .unwrap();
    for rows in [img.data(), txt.data()] {
        for row in rows.chunks(16) {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn visual_selector_census() {
    let m = model(20, true);
    let sel = TargetSelector::visual_encoder();
    let selected: Vec<&str> = m.params.names().filter(|n| sel.matches(n)).collect();
    let visual: Vec<&str> = m.names_with_prefix("visual.").collect();
    assert_eq!(selected, visual);
    assert!(!visual.is_empty());
    for prefix in ["text.", "fusion.", "decoder."] {
        assert!(m.names_with_prefix(prefix).all(|n| !sel.matches(n)));
        assert!(m.names_with_prefix(prefix).count() > 0);
    }
    // 4 blocks × 16 tensors + final norm + patch embed + cls + pos
    assert_eq!(visual.len(), 4 * 16 + 2 + 2 + 1 + 1);
}

#[test]
fn names_are_stable_across_seeds() {
    let a: Vec<String> = model(1, true).params.names().map(String::from).collect();
    let b: Vec<String> = model(2, true).params.names().map(String::from).collect();
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    let bad = ModelConfig {
        visual_depth: 3,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = model(21, false);
    save_checkpoint(&path, &m.config, &m.params).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.config, m.config);
    assert_eq!(
        ck.params.names().collect::<Vec<_>>(),
        m.params.names().collect::<Vec<_>>()
    );
    for (name, t) in m.params.iter() {
        let back = ck.params.get(name).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.data()), bits(t.data()));
    }
}

#[test]
fn finetune_model_loads_by_name_and_reports_fresh_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pt.ckpt");
    let pt = model(22, false);
    save_checkpoint(&path, &pt.config, &pt.params).unwrap();
    let mut ft = model(23, true);
    let report = ft.load_from(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(report.loaded.len(), pt.params.len());
    assert!(!report.fresh.is_empty());
    assert!(report.fresh.iter().all(|n| n.starts_with("decoder.")));
    for (name, t) in pt.params.iter() {
        assert_eq!(ft.params.get(name).unwrap(), t);
    }
}

#[test]
fn checkpoint_mismatch_names_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    let mut pt = model(24, false);
    pt.params.insert("itm_head.bias", Tensor::zeros(vec![3]));
    save_checkpoint(&path, &pt.config, &pt.params).unwrap();
    let mut ft = model(25, true);
    let err = ft.load_from(&load_checkpoint(&path).unwrap()).unwrap_err().to_string();
    assert!(err.contains("itm_head.bias"), "{err}");

    let mut missing = model(26, false);
    missing.params.remove("text.pos");
    save_checkpoint(&path, &missing.config, &missing.params).unwrap();
    let err = ft.load_from(&load_checkpoint(&path).unwrap()).unwrap_err().to_string();
    assert!(err.contains("text.pos"), "{err}");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint(&path).is_err());
    let m = model(27, false);
    save_checkpoint(&path, &m.config, &m.params).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
