//! Loss gradient vs an independent f64 oracle, optimizer behavior, and
//! archive round-trips.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use vlsme_tensor::{
    checksum_array, load_archive, save_archive, AdamW, AdamWConfig, Graph, ParamStore,
};

/// Independent f64 reference of the combined loss; shares no code with the op.
fn loss_ref(z: &[f64], m: &[f64], batch: usize, wb: f64, wd: f64, eps: f64) -> f64 {
    let per = z.len() / batch;
    let mut bce = 0.0;
    let mut dice = 0.0;
    for s in 0..batch {
        let (mut sp, mut sm, mut spm) = (0.0, 0.0, 0.0);
        for i in s * per..(s + 1) * per {
            bce += z[i].max(0.0) - z[i] * m[i] + (1.0 + (-z[i].abs()).exp()).ln();
            let p = 1.0 / (1.0 + (-z[i]).exp());
            sp += p;
            sm += m[i];
            spm += p * m[i];
        }
        dice += 1.0 - (2.0 * spm + eps) / (sp + sm + eps);
    }
    wb * bce / z.len() as f64 + wd * dice / batch as f64
}

#[test]
fn bce_dice_gradient_matches_f64_finite_differences() {
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    for case in 0..20 {
        let batch = 1 + case % 2;
        let shape = [batch, 8, 8];
        let n: usize = shape.iter().product();
        let logits: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 6.0 - 3.0).collect();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f32>() > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let la = ArrayD::from_shape_vec(IxDyn(&shape), logits.clone()).unwrap();
        let ma = ArrayD::from_shape_vec(IxDyn(&shape), mask.clone()).unwrap();

        let mut g = Graph::new();
        let lt = g.leaf(la);
        let loss = g.bce_dice_loss(lt, &ma, 1.0, 1.0, 1e-6);
        let grads = g.backward(loss);
        let analytic = grads.wrt(lt).unwrap();

        let z64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let m64: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
        let h = 1e-5;
        for idx in (0..n).step_by(7) {
            let mut zp = z64.clone();
            zp[idx] += h;
            let mut zm = z64.clone();
            zm[idx] -= h;
            let num = (loss_ref(&zp, &m64, batch, 1.0, 1.0, 1e-6)
                - loss_ref(&zm, &m64, batch, 1.0, 1.0, 1e-6))
                / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[idx] as f64;
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "case {case} idx {idx}: analytic {ana:.8e} vs fd {num:.8e} rel {rel:.2e}"
            );
        }
    }
}

#[test]
fn loss_value_matches_reference() {
    let mut rng = ChaCha20Rng::seed_from_u64(43);
    let shape = [2usize, 4, 4];
    let n: usize = shape.iter().product();
    let logits: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f32>() > 0.4 { 1.0 } else { 0.0 })
        .collect();
    let la = ArrayD::from_shape_vec(IxDyn(&shape), logits.clone()).unwrap();
    let ma = ArrayD::from_shape_vec(IxDyn(&shape), mask.clone()).unwrap();
    let mut g = Graph::new();
    let lt = g.constant(la);
    let loss = g.bce_dice_loss(lt, &ma, 0.7, 1.3, 1e-6);
    let z64: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    let m64: Vec<f64> = mask.iter().map(|&v| v as f64).collect();
    let want = loss_ref(&z64, &m64, 2, 0.7, 1.3, 1e-6);
    assert!((g.scalar(loss) as f64 - want).abs() < 1e-5);
}

#[test]
fn adamw_zero_lr_is_identity() {
    let mut store = ParamStore::new();
    store.add_param("w", ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.5, 2.0]).unwrap());
    let before = checksum_array(store.param("w"));
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.0,
        ..Default::default()
    });
    let mut grads = BTreeMap::new();
    grads.insert(
        "w".to_string(),
        ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 3.0]).unwrap(),
    );
    let trainable: BTreeSet<String> = ["w".to_string()].into();
    for _ in 0..3 {
        opt.step(&mut store, &grads, &trainable);
    }
    assert_eq!(before, checksum_array(store.param("w")));
}

#[test]
fn adamw_descends_quadratic() {
    // minimize (w - 3)^2 elementwise
    let mut store = ParamStore::new();
    store.add_param("w", ArrayD::zeros(IxDyn(&[4])));
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    });
    let trainable: BTreeSet<String> = ["w".to_string()].into();
    for _ in 0..200 {
        let grad = store.param("w").map(|v| 2.0 * (v - 3.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), grad);
        opt.step(&mut store, &grads, &trainable);
    }
    for &v in store.param("w").iter() {
        assert!((v - 3.0).abs() < 0.1, "w = {v}");
    }
}

#[test]
fn adamw_skips_untrainable_params() {
    let mut store = ParamStore::new();
    store.add_param("frozen", ArrayD::ones(IxDyn(&[2])));
    store.add_param("live", ArrayD::ones(IxDyn(&[2])));
    let frozen_before = checksum_array(store.param("frozen"));
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.05,
        ..Default::default()
    });
    let mut grads = BTreeMap::new();
    grads.insert("frozen".to_string(), ArrayD::ones(IxDyn(&[2])));
    grads.insert("live".to_string(), ArrayD::ones(IxDyn(&[2])));
    let trainable: BTreeSet<String> = ["live".to_string()].into();
    opt.step(&mut store, &grads, &trainable);
    assert_eq!(frozen_before, checksum_array(store.param("frozen")));
    assert_ne!(checksum_array(store.param("live")), frozen_before);
}

#[test]
fn archive_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("test.vck");
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut tensors: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    for (name, shape) in [("a.w", vec![3usize, 4]), ("b.bias", vec![5]), ("c", vec![2, 2, 2])] {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 100.0 - 50.0).collect();
        tensors.insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
    }
    let meta = serde_json::json!({"kind": "test", "nested": {"x": 1}});
    save_archive(
        &path,
        &meta,
        tensors.iter().map(|(k, v)| (k.as_str(), v)),
    )
    .unwrap();
    let loaded = load_archive(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    assert_eq!(loaded.tensors.len(), tensors.len());
    for (name, arr) in &tensors {
        assert_eq!(
            checksum_array(arr),
            checksum_array(loaded.tensor(name).unwrap()),
            "tensor {name} not bit-identical"
        );
    }
}

#[test]
fn archive_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.vck");
    std::fs::write(&path, b"definitely not an archive").unwrap();
    assert!(load_archive(&path).is_err());
}

#[test]
fn checksum_detects_single_bit_change() {
    let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f32, 2.0, 3.0]).unwrap();
    let mut b = a.clone();
    b.as_slice_mut().unwrap()[1] = f32::from_bits(2.0f32.to_bits() ^ 1);
    assert_ne!(checksum_array(&a), checksum_array(&b));
    // shape participates too
    let c = ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![1.0f32, 2.0, 3.0]).unwrap();
    assert_ne!(checksum_array(&a), checksum_array(&c));
}
