//! Frozen encoder contract: shapes, determinism, the freeze boundary, and
//! the trainable decoder's conditioning.

use ndarray::{Array3, ArrayD};
use vlsme_core::backbone::{
    decode_single, verify_frozen, Backbone, BackboneName, VlsmDecoder, VlsmDecoderConfig,
    TOY_EMBED_DIM, TOY_LAYERS,
};
use vlsme_tensor::{checksum_array, Graph, Initializer, ParamStore};

fn zero_image(side: usize) -> Array3<f32> {
    Array3::zeros((3, side, side))
}

fn noisy_image(side: usize, seed: u64) -> Array3<f32> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut img = Array3::zeros((3, side, side));
    for v in img.iter_mut() {
        *v = rng.random::<f32>();
    }
    img
}

#[test]
fn toy_at_352_produces_484_tokens() {
    let b = Backbone::toy(0);
    let bundle = b.encode(&zero_image(352), "a polyp").unwrap();
    assert_eq!(bundle.grid_side, 22);
    assert_eq!(bundle.patch_tokens.dim(), (484, TOY_EMBED_DIM));
    assert_eq!(bundle.pooled_image_embed.len(), TOY_EMBED_DIM);
    assert_eq!(bundle.text_embed.len(), TOY_EMBED_DIM);
}

#[test]
fn encode_is_bit_deterministic() {
    let b = Backbone::toy(3);
    let img = noisy_image(64, 5);
    let one = b.encode(&img, "lesion in the image").unwrap();
    let two = b.encode(&img, "lesion in the image").unwrap();
    assert_eq!(
        checksum_array(&one.patch_tokens.clone().into_dyn()),
        checksum_array(&two.patch_tokens.clone().into_dyn())
    );
    assert_eq!(
        checksum_array(&one.text_embed.clone().into_dyn()),
        checksum_array(&two.text_embed.clone().into_dyn())
    );
}

#[test]
fn toy_seed0_zero_image_golden_checksum() {
    // pinned from the seeded toy backbone (seed 0, all-zero 352 image, "x")
    let b = Backbone::toy(0);
    let bundle = b.encode(&zero_image(352), "x").unwrap();
    let got = checksum_array(&bundle.pooled_image_embed.clone().into_dyn());
    assert_eq!(
        got,
        "939426bd62a85c150679e3e79bd4cc2b2d94d2d6f37114a53446787c8fec99a4"
    );
}

#[test]
fn different_seeds_differ() {
    let img = noisy_image(64, 1);
    let a = Backbone::toy(0).encode(&img, "p").unwrap();
    let b = Backbone::toy(1).encode(&img, "p").unwrap();
    assert_ne!(
        checksum_array(&a.patch_tokens.into_dyn()),
        checksum_array(&b.patch_tokens.into_dyn())
    );
}

#[test]
fn file_roundtrip_preserves_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.vck");
    let b = Backbone::toy(7);
    b.save(&path).unwrap();
    let loaded = Backbone::from_file(&path, BackboneName::Toy).unwrap();
    let img = noisy_image(64, 9);
    let one = b.encode(&img, "prompt").unwrap();
    let two = loaded.encode(&img, "prompt").unwrap();
    assert_eq!(
        checksum_array(&one.patch_tokens.into_dyn()),
        checksum_array(&two.patch_tokens.into_dyn())
    );
}

#[test]
fn wrong_backbone_name_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.vck");
    Backbone::toy(0).save(&path).unwrap();
    let err = match Backbone::from_file(&path, BackboneName::Clip) {
        Err(e) => e,
        Ok(_) => panic!("mismatched backbone name must not load"),
    };
    assert!(err.to_string().contains("toy"));
}

#[test]
fn native_224_checkpoint_resizes_grid_to_22() {
    // a biomedclip-style encoder: fixed 224 input (14x14 native grid),
    // wrapper resizes the token grid to the /16 contract
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bio.vck");
    let toy = Backbone::toy(11)
        .renamed(BackboneName::Biomedclip)
        .with_native_input(Some(224));
    toy.save(&path).unwrap();
    let b = Backbone::from_file(&path, BackboneName::Biomedclip).unwrap();
    let bundle = b.encode(&noisy_image(352, 2), "polyp").unwrap();
    assert_eq!(bundle.grid_side, 22);
    assert_eq!(bundle.patch_tokens.dim(), (484, TOY_EMBED_DIM));
    // and at 64 input the same encoder lands on a 4x4 grid
    let bundle = b.encode(&noisy_image(64, 2), "polyp").unwrap();
    assert_eq!(bundle.grid_side, 4);
}

#[test]
fn long_prompt_truncates_with_warning() {
    let b = Backbone::toy(0);
    let long: String = std::iter::repeat("word").take(200).collect::<Vec<_>>().join(" ");
    let _ = b.encode(&zero_image(64), &long).unwrap();
    let warnings = b.take_warnings();
    assert_eq!(warnings.len(), 1);
    assert_eq!(warnings[0].max_len, 77);
    assert!(b.take_warnings().is_empty());
}

#[test]
fn freeze_report_counts_match_architecture() {
    let b = Backbone::toy(0);
    let report = b.freeze_report();
    // per transformer layer: 2 LN pairs + qkv w/b + proj w/b + 2 mlp w/b = 12
    let per_layer = 12;
    let vision = 2 + TOY_LAYERS * per_layer + 2; // patch embed + layers + final LN
    let text = 1 + TOY_LAYERS * per_layer + 2 + 2; // token embed + layers + LN + proj
    let norm = 2; // channel mean/std
    assert_eq!(report.len(), vision + text + norm);
    let spec = b.spec();
    assert_eq!(spec.frozen_param_ids.len(), report.len());
    assert!(spec.frozen_param_ids.iter().all(|id| id.starts_with("backbone.toy.")));
}

#[test]
fn verify_frozen_detects_tampering() {
    let b = Backbone::toy(0);
    let before = b.freeze_report();
    assert!(verify_frozen(&before, &before).is_ok());
    // negative control: pretend a decoder param belongs to the frozen set
    let mut with_decoder = before.clone();
    with_decoder.insert("vlsm_decoder.toy.head.w".into(), "aaaa".into());
    assert!(verify_frozen(&with_decoder, &before).is_err());
    let mut after = before.clone();
    let key = after.keys().next().unwrap().clone();
    after.insert(key, "deadbeef".into());
    assert!(verify_frozen(&before, &after).is_err());
}

fn toy_decoder_setup(seed: u64) -> (Backbone, VlsmDecoder, ParamStore) {
    let b = Backbone::toy(seed);
    let decoder = VlsmDecoder::new(
        "vlsm_decoder.toy",
        VlsmDecoderConfig::default(),
        b.embed_dim(),
        b.text_dim(),
    );
    let mut store = ParamStore::new();
    let mut init = Initializer::from_seed(seed + 100);
    decoder.register(&mut store, &mut init);
    (b, decoder, store)
}

#[test]
fn decode_upsamples_to_input_resolution() {
    let (b, decoder, store) = toy_decoder_setup(0);
    let bundle = b.encode(&noisy_image(64, 3), "the disc").unwrap();
    let out = decode_single(&decoder, &store, &bundle, 64).unwrap();
    assert_eq!(out.decoder_logits.dim(), (64, 64));
    assert!(out.decoder_logits.iter().all(|v| v.is_finite()));
}

#[test]
fn text_conditioning_reaches_decoder_output() {
    let (b, decoder, store) = toy_decoder_setup(1);
    let img = noisy_image(64, 4);
    let one = b.encode(&img, "a bright disc").unwrap();
    let two = b.encode(&img, "nothing at all here").unwrap();
    // same patch tokens, different text
    let mut swapped = one.clone();
    swapped.text_embed = two.text_embed.clone();
    let out1 = decode_single(&decoder, &store, &one, 64).unwrap();
    let out2 = decode_single(&decoder, &store, &swapped, 64).unwrap();
    let diff = (&out1.decoder_logits - &out2.decoder_logits)
        .iter()
        .fold(0.0f32, |a, v| a.max(v.abs()));
    assert!(diff > 1e-6, "text conditioning is dead (max diff {diff})");
}

#[test]
fn decoder_params_all_receive_gradients() {
    let (b, decoder, store) = toy_decoder_setup(2);
    let bundle = b.encode(&noisy_image(64, 6), "blob").unwrap();
    let mut g = Graph::new();
    let tokens = bundle
        .patch_tokens
        .clone()
        .insert_axis(ndarray::Axis(0))
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap();
    let text = bundle
        .text_embed
        .clone()
        .insert_axis(ndarray::Axis(0))
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    let out = decoder.forward(&mut g, &store, &tokens, &text, bundle.grid_side, 64);
    // random projection objective so no symmetry hides a gradient
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
    let shape: Vec<usize> = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let proj: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
    let proj = g.constant(ArrayD::from_shape_vec(ndarray::IxDyn(&shape), proj).unwrap());
    let prod = g.mul(out, proj);
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).into_param_grads();
    for name in store.param_names() {
        let grad = grads
            .get(name)
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let norm: f32 = grad.iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "zero gradient for {name}");
    }
}
