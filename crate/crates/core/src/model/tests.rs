use super::*;
use crate::corpus::{Region, RegionBox};
use crate::masking::{make_batch, ItmLabel, MaskingPolicy, PretrainInstance};
use crate::numerics::Tensor;
use crate::testkit::tiny_setup;
use crate::textproc::Vocab;
use crate::train::{batch_of, Dataset};

fn positive_batch(data: &Dataset, n: usize, seed: u64) -> Batch {
    let policy = MaskingPolicy {
        p_neg: 0.0,
        ..Default::default()
    };
    let instances: Vec<PretrainInstance> = (0..n)
        .map(|i| data.instance(i, &policy, seed + i as u64).unwrap())
        .collect();
    batch_of(&instances).unwrap()
}

fn set(model: &mut Model<f64>, name: &str, f: impl Fn(&[usize], usize) -> f64) {
    let id = model.params().id(name).unwrap();
    let p = model.params_mut().get_mut(id);
    let shape = p.value.shape().to_vec();
    for (k, x) in p.value.data_mut().iter_mut().enumerate() {
        *x = f(&shape, k);
    }
}

fn row(t: &Tensor<f64>, r: usize) -> Vec<f64> {
    let h = t.shape()[1];
    t.data()[r * h..(r + 1) * h].to_vec()
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let mut bad = ModelConfig::default();
    bad.text.heads = 3;
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        co_attention: vec![],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        co_attention: vec![(4, 0)],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        co_attention: vec![(1, 1), (2, 1)],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn cls_embedding_is_sum_of_tables() {
    let (_, mc) = tiny_setup(5);
    let m = Model::<f64>::new(mc, 1).unwrap();
    let e = m.embed_text(&[Vocab::CLS_ID]).unwrap();
    let p = m.params();
    let w = row(p.value(m.layout.word_emb), Vocab::CLS_ID as usize);
    let s = row(p.value(m.layout.seg_emb), 0);
    let pos = row(p.value(m.layout.pos_emb), 0);
    let expected: Vec<f64> = (0..w.len()).map(|k| w[k] + pos[k] + s[k]).collect();
    assert_eq!(row(&e, 0), expected);
}

#[test]
fn repeated_token_differs_by_position_embedding() {
    let (_, mc) = tiny_setup(5);
    let m = Model::<f64>::new(mc, 1).unwrap();
    let e = m.embed_text(&[7, 7, 7]).unwrap();
    let pos = m.params().value(m.layout.pos_emb);
    let (a, b) = (row(&e, 0), row(&e, 2));
    let (pa, pb) = (row(pos, 0), row(pos, 2));
    for k in 0..a.len() {
        assert!(((b[k] - a[k]) - (pb[k] - pa[k])).abs() < 1e-15);
    }
}

#[test]
fn zeroed_tables_embed_to_zero() {
    let (_, mc) = tiny_setup(5);
    let mut m = Model::<f64>::new(mc, 1).unwrap();
    for name in ["text.word_emb", "text.pos_emb", "text.seg_emb"] {
        set(&mut m, name, |_, _| 0.0);
    }
    let e = m.embed_text(&[2, 9, 3]).unwrap();
    assert!(e.data().iter().all(|&x| x == 0.0));
}

#[test]
fn text_longer_than_maximum_rejected() {
    let (_, mc) = tiny_setup(5);
    let max = mc.max_text_len;
    let m = Model::<f64>::new(mc, 1).unwrap();
    assert!(m.embed_text(&vec![5; max + 1]).is_err());
}

fn identity_model() -> (Model<f64>, ImageRecord) {
    let (data, mc) = tiny_setup(5);
    let mut m = Model::<f64>::new(mc, 1).unwrap();
    // identity projections: feature into dims 0..8, location into dims 0..5
    set(&mut m, "visual.feat_proj.w", |s, k| ((k / s[1]) == (k % s[1])) as u8 as f64);
    set(&mut m, "visual.loc_proj.w", |s, k| ((k / s[1]) == (k % s[1])) as u8 as f64);
    (m, data.images[0].clone())
}

#[test]
fn identity_projection_embeds_feature_plus_location() {
    let (m, mut img) = identity_model();
    img.regions.truncate(1);
    let out = m.embed_regions(&img).unwrap();
    let r = &img.regions[0];
    let loc = location_feature(&r.bbox).map(|x| x as f32 as f64);
    let got = row(&out, 1);
    for k in 0..got.len() {
        let f = r.feature.get(k).map_or(0.0, |&x| x as f64);
        let l = loc.get(k).copied().unwrap_or(0.0);
        assert!((got[k] - (f + l)).abs() < 1e-12, "dim {k}");
    }
    // a single region is its own mean; [IMG] uses the full-image location
    let img_slot = row(&out, 0);
    for k in 0..got.len() {
        let f = r.feature.get(k).map_or(0.0, |&x| x as f64);
        let l = FULL_IMAGE_LOCATION.get(k).copied().unwrap_or(0.0);
        assert!((img_slot[k] - (f + l)).abs() < 1e-12);
    }
}

#[test]
fn region_permutation_permutes_outputs() {
    let (m, img) = identity_model();
    let a = m.embed_regions(&img).unwrap();
    let mut shuffled = img.clone();
    shuffled.regions.reverse();
    let b = m.embed_regions(&shuffled).unwrap();
    let n = img.regions.len();
    for (x, y) in row(&a, 0).iter().zip(row(&b, 0)) {
        assert!((x - y).abs() < 1e-12);
    }
    for i in 0..n {
        assert_eq!(row(&a, 1 + i), row(&b, n - i));
    }
}

#[test]
fn wrong_feature_dim_rejected() {
    let (m, mut img) = identity_model();
    img.regions[0] = Region {
        bbox: RegionBox::full(10.0, 10.0),
        feature: vec![0.0; 3],
        class_id: 0,
    };
    assert!(matches!(m.embed_regions(&img), Err(Error::Shape { .. })));
}

#[test]
fn attention_rows_sum_to_one() {
    let (data, mc) = tiny_setup(8);
    let m = Model::<f64>::new(mc, 2).unwrap();
    let batch = positive_batch(&data, 4, 0);
    let fwd = m.forward::<seed::Rng>(&batch, None).unwrap();
    assert!(!fwd.attention.is_empty());
    for &a in &fwd.attention {
        let t = fwd.tape.value(a);
        let keys = *t.shape().last().unwrap();
        for row in t.data().chunks(keys) {
            let s: f64 = row.iter().sum();
            // real query rows sum to one; no batch element is fully padded
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }
}

#[test]
fn padding_changes_nothing() {
    let (data, mc) = tiny_setup(8);
    let m = Model::<f64>::new(mc, 2).unwrap();
    let policy = MaskingPolicy {
        p_neg: 0.0,
        ..Default::default()
    };
    let inst: Vec<_> = (0..2).map(|i| data.instance(i, &policy, 40 + i as u64).unwrap()).collect();
    let t = inst.iter().map(|i| i.len()).max().unwrap();
    let r = inst.iter().map(|i| i.regions()).max().unwrap();
    let tight = make_batch(&inst, t, r).unwrap();
    let padded = make_batch(&inst, t + 3, r + 2).unwrap();
    let mut a = m.forward::<seed::Rng>(&tight, None).unwrap();
    let mut b = m.forward::<seed::Rng>(&padded, None).unwrap();
    let la = m.mlm_logits_all(&mut a).unwrap();
    let lb = m.mlm_logits_all(&mut b).unwrap();
    let v = m.config().vocab_size;
    let (la, lb) = (a.tape.value(la).data().to_vec(), b.tape.value(lb).data().to_vec());
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        for p in 0..inst[k].len() {
            for c in 0..v {
                worst = worst.max((la[(k * t + p) * v + c] - lb[(k * (t + 3) + p) * v + c]).abs());
            }
        }
    }
    let ra = m.region_logits_all(&mut a).unwrap();
    let rb = m.region_logits_all(&mut b).unwrap();
    let c = m.config().region_classes;
    let (ra, rb) = (a.tape.value(ra).data().to_vec(), b.tape.value(rb).data().to_vec());
    for k in 0..2 {
        for s in 0..=inst[k].regions() {
            for j in 0..c {
                worst = worst.max((ra[(k * (r + 1) + s) * c + j] - rb[(k * (r + 3) + s) * c + j]).abs());
            }
        }
    }
    let (ia, ib) = (a.tape.value(a.itm).data(), b.tape.value(b.itm).data());
    for k in 0..2 {
        worst = worst.max((ia[k] - ib[k]).abs());
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let (data, mc) = tiny_setup(8);
    let m = Model::<f32>::new(mc, 2).unwrap();
    let batch = positive_batch(&data, 4, 0);
    let a = m.forward::<seed::Rng>(&batch, None).unwrap();
    let b = m.forward::<seed::Rng>(&batch, None).unwrap();
    assert_eq!(a.tape.value(a.text), b.tape.value(b.text));
    assert_eq!(a.tape.value(a.visual), b.tape.value(b.visual));
    assert_eq!(a.tape.value(a.itm), b.tape.value(b.itm));
}

#[test]
fn output_shapes() {
    let (data, mc) = tiny_setup(8);
    let m = Model::<f32>::new(mc, 2).unwrap();
    let batch = positive_batch(&data, 3, 0);
    let mut fwd = m.forward::<seed::Rng>(&batch, None).unwrap();
    let (b, t, i) = (batch.size, batch.max_t, batch.max_i);
    let mlm = m.mlm_logits_all(&mut fwd).unwrap();
    let reg = m.region_logits_all(&mut fwd).unwrap();
    assert_eq!(fwd.tape.shape(mlm), [b * t, m.config().vocab_size]);
    assert_eq!(fwd.tape.shape(reg), [b * (i + 1), m.config().region_classes]);
    assert_eq!(fwd.tape.shape(fwd.itm), [b]);
    assert_eq!(fwd.tape.shape(fwd.h_cls), [b, m.config().text.hidden]);
    // h_cls is the text state at position 0 of each sequence
    let h = m.config().text.hidden;
    let text = fwd.tape.value(fwd.text).data();
    let cls = fwd.tape.value(fwd.h_cls).data();
    assert_eq!(&cls[h..2 * h], &text[t * h..(t + 1) * h]);
}

#[test]
fn negative_batch_has_only_matching_loss() {
    let (data, mc) = tiny_setup(8);
    let m = Model::<f64>::new(mc, 2).unwrap();
    let policy = MaskingPolicy {
        p_neg: 1.0,
        ..Default::default()
    };
    let inst: Vec<_> = (0..4).map(|i| data.instance(i, &policy, i as u64).unwrap()).collect();
    assert!(inst.iter().all(|i| i.itm_label == ItmLabel::Negative));
    let l = m.eval_loss(&batch_of(&inst).unwrap()).unwrap();
    assert_eq!((l.l_obj, l.l_attr, l.l_rel, l.l_mlm, l.l_region), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(l.l_itm > 0.0);
    assert_eq!(l.total, l.l_itm);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let (data, mc) = tiny_setup(8);
    let mut m = Model::<f64>::new(mc, 2).unwrap();
    set(&mut m, "text.word_emb", |_, _| 0.0);
    let mut inst = PretrainInstance::unmasked("c", &data.examples[0].aligned, &data.images[0]);
    inst.mask_span(1, 1, Task::Object);
    let l = m.eval_loss(&batch_of(&[inst]).unwrap()).unwrap();
    let v = m.config().vocab_size as f64;
    assert!((l.l_obj - v.ln()).abs() < 1e-12, "{} vs {}", l.l_obj, v.ln());
}

#[test]
fn total_is_exact_sum_and_tasks_are_independent() {
    let (data, mc) = tiny_setup(30);
    let m = Model::<f64>::new(mc, 2).unwrap();
    let batch = positive_batch(&data, 12, 3);
    let l = m.eval_loss(&batch).unwrap();
    assert_eq!(l.total, l.l_obj + l.l_attr + l.l_rel + l.l_mlm + l.l_region + l.l_itm);
    assert!(l.l_obj > 0.0 && l.l_attr > 0.0 && l.l_rel > 0.0 && l.l_mlm > 0.0 && l.l_region > 0.0);

    // removing the attribute labels changes only the attribute term
    let mut b2 = batch.clone();
    for p in 0..b2.token_labels.len() {
        if b2.token_tasks[p] == Some(Task::Attribute) {
            b2.token_labels[p] = None;
            b2.token_tasks[p] = None;
        }
    }
    let l2 = m.eval_loss(&b2).unwrap();
    assert_eq!(l2.l_attr, 0.0);
    assert_eq!((l2.l_obj, l2.l_rel, l2.l_mlm, l2.l_region, l2.l_itm), (l.l_obj, l.l_rel, l.l_mlm, l.l_region, l.l_itm));
}

#[test]
fn small_model_gradients_match_finite_differences() {
    let (data, mc) = tiny_setup(8);
    let mc = ModelConfig { dropout: 0.0, ..mc };
    let mut m = Model::<f64>::new(mc, 4).unwrap();
    let batch = positive_batch(&data, 3, 1);
    let check = gradient_check(&mut m, &batch, 60, 1e-5, 8).unwrap();
    let name = &m.params().iter().nth(check.worst.0).unwrap().name;
    assert!(check.max_rel_error < 1e-4, "{check:?} at {name}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let (_, mc) = tiny_setup(5);
    let m = Model::<f32>::new(mc.clone(), 3).unwrap();
    let ck = Checkpoint::new(m);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.config(), &mc);
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}
