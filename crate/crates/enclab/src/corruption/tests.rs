use super::*;
use crate::encoder::vocab::build_vocab;
use crate::encoder::ModelConfig;

fn model_with_layers(num_layers: usize) -> EncoderModel {
    let vocab = build_vocab(["one two three four five six seven"], 16).unwrap();
    let config = ModelConfig {
        num_layers,
        hidden: 8,
        num_heads: 2,
        ffn_multiplier: 2,
        max_len: 8,
        vocab_size: vocab.size(),
        dropout: 0.1,
        num_classes: 2,
    };
    EncoderModel::new(config, vocab, 3).unwrap()
}

#[test]
fn layer_range_matches_published_row_labels() {
    let cases: [(usize, f64, &[usize]); 10] = [
        (12, 0.25, &[1, 2, 3]),
        (12, 0.50, &[1, 2, 3, 4, 5, 6]),
        (12, 0.75, &[1, 2, 3, 4, 5, 6, 7, 8, 9]),
        (12, 1.0, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]),
        (24, 0.25, &[1, 2, 3, 4, 5, 6]),
        (24, 0.50, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12]),
        (
            24,
            0.75,
            &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18],
        ),
        (
            24,
            1.0,
            &[
                1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22,
                23, 24,
            ],
        ),
        (6, 0.5, &[1, 2, 3]),
        (6, 1.0, &[1, 2, 3, 4, 5, 6]),
    ];
    for (l, f, expect) in cases {
        let dir = if f == 1.0 { Direction::Full } else { Direction::Bottom };
        assert_eq!(layer_range(l, f, dir).unwrap(), expect, "L={l} f={f}");
        if f == 1.0 {
            // fraction 1 resolves identically under an explicit direction
            assert_eq!(layer_range(l, f, Direction::Bottom).unwrap(), expect);
        }
    }
}

#[test]
fn layer_range_top_is_anchored_at_the_last_layer() {
    assert_eq!(layer_range(12, 0.25, Direction::Top).unwrap(), vec![10, 11, 12]);
    assert_eq!(
        layer_range(4, 0.5, Direction::Top).unwrap(),
        vec![3, 4]
    );
}

#[test]
fn layer_range_zero_fraction_is_empty() {
    for dir in [Direction::Bottom, Direction::Top, Direction::None] {
        assert!(layer_range(12, 0.0, dir).unwrap().is_empty());
    }
}

#[test]
fn layer_range_non_integral_names_nearest_fractions() {
    let err = layer_range(12, 0.3, Direction::Bottom).unwrap_err().to_string();
    assert!(err.contains("3/12"), "{err}");
    assert!(err.contains("4/12"), "{err}");
}

#[test]
fn layer_range_rejects_out_of_range_fraction() {
    assert!(layer_range(12, -0.1, Direction::Bottom).is_err());
    assert!(layer_range(12, 1.5, Direction::Bottom).is_err());
}

#[test]
fn direction_full_none_require_matching_fraction() {
    assert!(layer_range(12, 0.5, Direction::Full).is_err());
    assert!(layer_range(12, 0.5, Direction::None).is_err());
    assert_eq!(layer_range(12, 1.0, Direction::Full).unwrap().len(), 12);
}

#[test]
fn classify_parameter_examples() {
    assert_eq!(classify_parameter("layer.3.attn_out.bias").unwrap(), ParamKind::Bias);
    assert_eq!(
        classify_parameter("layer.3.ln1.weight").unwrap(),
        ParamKind::LayerNormWeight
    );
    assert_eq!(classify_parameter("layer.3.ffn1.weight").unwrap(), ParamKind::Weight);
    assert_eq!(
        classify_parameter("layer.7.ln2.bias").unwrap(),
        ParamKind::LayerNormBias
    );
    assert_eq!(
        classify_parameter("embeddings.ln.weight").unwrap(),
        ParamKind::LayerNormWeight
    );
    assert_eq!(
        classify_parameter("embeddings.token.weight").unwrap(),
        ParamKind::Weight
    );
    assert!(classify_parameter("mystery_blob").is_err());
    assert!(classify_parameter("layer.3.attn_q.scale").is_err());
}

#[test]
fn every_census_name_classifies() {
    let model = model_with_layers(4);
    for p in model.params.iter() {
        classify_parameter(&p.name).unwrap();
    }
}

#[test]
fn kaiming_bound_closed_forms() {
    assert!((kaiming_bound(6) - 1.0).abs() < 1e-12);
    assert!((kaiming_bound(600) - 0.1).abs() < 1e-12);
    assert!((kaiming_bound(24) - 0.5).abs() < 1e-12);
}

#[test]
fn corrupt_zero_fraction_is_identity() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.0, Direction::None, 7, false).unwrap();
    let (out, manifest) = corrupt(&model, &spec).unwrap();
    assert!(manifest.entries.is_empty());
    assert_eq!(out.params.checksum(), model.params.checksum());
}

#[test]
fn corrupt_sets_exact_constants_inside_range() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.5, Direction::Bottom, 7, false).unwrap();
    let (out, manifest) = corrupt(&model, &spec).unwrap();
    for layer in [1usize, 2] {
        for ln in ["ln1", "ln2"] {
            let g = out.params.get(&format!("layer.{layer}.{ln}.weight")).unwrap();
            assert!(g.data.iter().all(|&v| v == 1.0));
            let b = out.params.get(&format!("layer.{layer}.{ln}.bias")).unwrap();
            assert!(b.data.iter().all(|&v| v == 0.0));
        }
        for comp in ["attn_q", "attn_k", "attn_v", "attn_out", "ffn1", "ffn2"] {
            let b = out.params.get(&format!("layer.{layer}.{comp}.bias")).unwrap();
            assert!(b.data.iter().all(|&v| v == 0.0));
        }
    }
    // Manifest covers the resolved layers and nothing else.
    assert!(manifest
        .entries
        .iter()
        .all(|e| matches!(parse_layer_index(&e.name), Some(1 | 2))));
    assert_eq!(manifest.entries.len(), 16 * 2);
}

#[test]
fn corrupt_weights_respect_bound_and_moments() {
    // fan_in 600 with >= 10^4 values exercises the moment checks.
    let mut model = model_with_layers(1);
    model
        .params
        .get_mut("layer.1.ffn1.weight")
        .map(|p| {
            p.shape = vec![600, 17];
            p.data = vec![0.0; 600 * 17];
        })
        .unwrap();
    let spec = CorruptionSpec::resolve(1, 1.0, Direction::Full, 123, false).unwrap();
    let (out, _) = corrupt(&model, &spec).unwrap();
    let w = out.params.get("layer.1.ffn1.weight").unwrap();
    let b = kaiming_bound(600);
    assert!((b - 0.1).abs() < 1e-12);
    let n = w.data.len() as f64;
    let mean = w.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = w
        .data
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n;
    assert!(w.data.iter().all(|&v| f64::from(v) >= -b && f64::from(v) <= b));
    let sigma = (b * b / 3.0 / n).sqrt();
    assert!(mean.abs() <= 3.0 * sigma, "mean {mean:.3e} vs 3 sigma {:.3e}", 3.0 * sigma);
    assert!((var - b * b / 3.0).abs() <= 0.1 * (b * b / 3.0));
}

#[test]
fn corrupt_is_idempotent_per_seed_and_local() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.25, Direction::Top, 99, false).unwrap();
    let (a, _) = corrupt(&model, &spec).unwrap();
    let (b, _) = corrupt(&model, &spec).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());

    // Locality: everything outside layer 4 is bit-identical.
    for (pb, pa) in model.params.iter().zip(a.params.iter()) {
        if parse_layer_index(&pb.name) != Some(4) {
            assert!(pb
                .data
                .iter()
                .zip(&pa.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    let other = CorruptionSpec::resolve(4, 0.25, Direction::Top, 100, false).unwrap();
    let (c, _) = corrupt(&model, &other).unwrap();
    assert_ne!(a.params.checksum(), c.params.checksum());
}

#[test]
fn include_embeddings_extends_scope_to_tables_and_heads() {
    let model = model_with_layers(2);
    let spec = CorruptionSpec::resolve(2, 0.0, Direction::None, 5, true).unwrap();
    let (out, manifest) = corrupt(&model, &spec).unwrap();
    assert!(manifest.entries.iter().any(|e| e.name == "embeddings.token.weight"));
    assert!(manifest.entries.iter().any(|e| e.name == "cls_head.bias"));
    let g = out.params.get("embeddings.ln.weight").unwrap();
    assert!(g.data.iter().all(|&v| v == 1.0));
    // Encoder layers stay untouched.
    let w_before = model.params.get("layer.1.attn_q.weight").unwrap();
    let w_after = out.params.get("layer.1.attn_q.weight").unwrap();
    assert_eq!(w_before.data, w_after.data);
}

#[test]
fn verify_accepts_corrupt_output() {
    let model = model_with_layers(4);
    for (fraction, direction) in [
        (0.0, Direction::None),
        (0.25, Direction::Bottom),
        (0.5, Direction::Top),
        (1.0, Direction::Full),
    ] {
        let spec = CorruptionSpec::resolve(4, fraction, direction, 17, false).unwrap();
        let (out, _) = corrupt(&model, &spec).unwrap();
        let report = verify_corruption(&model, &out, &spec).unwrap();
        assert!(report.pass(), "{fraction} {direction}: {:?}", report.violations);
    }
}

#[test]
fn verify_catches_tampered_untouched_layer() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.25, Direction::Bottom, 17, false).unwrap();
    let (mut out, _) = corrupt(&model, &spec).unwrap();
    out.params.get_mut("layer.3.attn_v.weight").unwrap().data[0] += 0.5;
    let report = verify_corruption(&model, &out, &spec).unwrap();
    assert!(!report.pass());
    assert!(report.violations[0].contains("layer.3.attn_v.weight"));
}

#[test]
fn verify_catches_wrong_constant() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.25, Direction::Bottom, 17, false).unwrap();
    let (mut out, _) = corrupt(&model, &spec).unwrap();
    out.params.get_mut("layer.1.ln1.weight").unwrap().data[2] = 0.999_999;
    let report = verify_corruption(&model, &out, &spec).unwrap();
    assert!(!report.pass());
    assert!(report.violations[0].contains("layer.1.ln1.weight"));
}

#[test]
fn verify_none_spec_requires_bit_identical_models() {
    let model = model_with_layers(4);
    let spec = CorruptionSpec::resolve(4, 0.0, Direction::None, 17, false).unwrap();
    let report = verify_corruption(&model, &model.clone(), &spec).unwrap();
    assert!(report.pass());

    let mut tampered = model.clone();
    tampered.params.get_mut("cls_head.weight").unwrap().data[0] += 1e-7;
    let report = verify_corruption(&model, &tampered, &spec).unwrap();
    assert!(!report.pass());
}

#[test]
fn spec_fingerprint_distinguishes_specs() {
    let a = CorruptionSpec::resolve(4, 0.25, Direction::Bottom, 1, false).unwrap();
    let b = CorruptionSpec::resolve(4, 0.25, Direction::Top, 1, false).unwrap();
    let c = CorruptionSpec::resolve(4, 0.25, Direction::Bottom, 2, false).unwrap();
    assert_ne!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.fingerprint(), a.clone().fingerprint());
}

#[test]
fn labels_render_layer_ranges() {
    let spec = CorruptionSpec::resolve(12, 0.25, Direction::Bottom, 1, false).unwrap();
    assert_eq!(spec.label(), "25% (1-3)");
    let spec = CorruptionSpec::resolve(12, 0.25, Direction::Top, 1, false).unwrap();
    assert_eq!(spec.label(), "25% (10-12)");
    let spec = CorruptionSpec::resolve(12, 0.0, Direction::None, 1, false).unwrap();
    assert_eq!(spec.label(), "0%");
    let spec = CorruptionSpec::resolve(12, 1.0, Direction::Full, 1, false).unwrap();
    assert_eq!(spec.label(), "100% (1-12)");
}
