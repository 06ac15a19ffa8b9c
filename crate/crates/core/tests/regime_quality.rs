use std::sync::OnceLock;

use ame_core::descriptors::{structural_profile, Descriptor, QuantileNormalizer};
use ame_core::regime::*;
use ame_core::synthetic::{gen_synthetic, into_dataset, Family, RegimeMix, SyntheticSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CROP: usize = 64;

struct Fixture {
    crops: Vec<LabeledCrop>,
    norm: QuantileNormalizer,
    predictor: RegimePredictor,
    report: RegimeTrainReport,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec::new(1000, 256, 11).with_mix(RegimeMix::single_families());
        let data = into_dataset(gen_synthetic(&spec).unwrap());
        let (crops, norm) = build_label_table(&data, 16_000, CROP, 3).unwrap();
        let (predictor, report) = train_regime_predictor(&crops, &norm, &RegimeTrainConfig::default()).unwrap();
        Fixture {
            crops,
            norm,
            predictor,
            report,
        }
    })
}

#[test]
fn validation_spearman_above_threshold() {
    let f = fixture();
    for d in Descriptor::ALL {
        assert!(f.report.val_spearman[d.index()] > 0.7, "{d:?}: {:?}", f.report);
    }
}

#[test]
fn shuffled_targets_give_null_model() {
    let f = fixture();
    let mut crops = f.crops[..4000].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for d in Descriptor::ALL {
        let mut col: Vec<f64> = crops.iter().map(|c| c.targets.get(d)).collect();
        col.shuffle(&mut rng);
        for (c, v) in crops.iter_mut().zip(col) {
            let mut a = c.targets.to_array();
            a[d.index()] = v;
            c.targets = ame_core::descriptors::RegimeProfile::from_array(a);
        }
    }
    let (_, rep) = train_regime_predictor(&crops, &f.norm, &RegimeTrainConfig::default()).unwrap();
    for d in 0..4 {
        assert!(rep.val_spearman[d].abs() < 0.15, "{rep:?}");
    }
}

#[test]
fn held_out_mae_against_analytical_profiles() {
    let f = fixture();
    // same generator, fresh seeds; crops taken like the training crops
    let spec = SyntheticSpec::new(800, 256, 77).with_mix(RegimeMix::single_families());
    let held = gen_synthetic(&spec).unwrap();
    let mut mae = [0.0; 4];
    for (i, s) in held.iter().enumerate() {
        let off = (i * 37) % (256 - CROP);
        let x = &s.series.variates[0][off..off + CROP];
        let truth = f.norm.apply(&structural_profile(x).unwrap()).to_array();
        let pred = f.predictor.predict_profile(x).unwrap().to_array();
        for d in 0..4 {
            mae[d] += (truth[d] - pred[d]).abs() / held.len() as f64;
        }
    }
    assert!(mae.iter().all(|&m| m < 0.15), "{mae:?}");
}

#[test]
fn sparse_series_rank_sparsity_first() {
    let f = fixture();
    let spec = SyntheticSpec::new(200, CROP, 123).with_mix(RegimeMix::only(Family::Sparse));
    let held = gen_synthetic(&spec).unwrap();
    let hits = held
        .iter()
        .filter(|s| {
            let p = f.predictor.predict_profile(&s.series.variates[0]).unwrap().to_array();
            (0..4).all(|d| p[3] >= p[d])
        })
        .count();
    assert!(hits >= 160, "{hits} of 200");
}
