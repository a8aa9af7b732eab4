use utg_core::fixtures::{house_sales_schema, synthetic_house_sales, two_cluster, two_pattern_images};
use utg_core::pipeline::*;
use utg_core::prior::{train_prior, PriorConfig};
use utg_core::rare::SamplerChoice;
use utg_core::vae::{generate_standard, train_vae, VaeConfig};
use utg_core::vqvae::{train_vqvae, VqVaeConfig};
use utg_core::{dataset::validate_row, RarityParams, ThresholdParam, VaeModel};

fn vae(ds: &utg_core::TabularDataset, k: usize, epochs: usize) -> VaeModel {
    train_vae(
        ds,
        &VaeConfig {
            latent_dim: k,
            encoder_hidden: vec![32, 32],
            decoder_hidden: vec![32, 32],
            epochs,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 1,
        },
    )
    .unwrap()
}

#[test]
fn rarer_params_give_more_novel_records() {
    let ds = two_cluster(400, 4, 1);
    let m = vae(&ds, 2, 40);
    let src = TabularSource { model: &m, reference: &ds, model_ref: "mem".into() };
    let s = SamplerChoice::default();
    let base = generate_lu_tabular(&src, RarityParams::baseline(), 500, 7, s).unwrap();
    let rare = generate_lu_tabular(&src, RarityParams::new(5.0, 5.0).unwrap(), 500, 7, s).unwrap();
    let mean = |r: &[LuRecord]| r.iter().map(|x| x.novelty).sum::<f64>() / r.len() as f64;
    println!("novelty {} vs {}", mean(&rare), mean(&base));
    assert!(mean(&rare) > mean(&base));
    assert!(rare.iter().all(|r| r.novelty >= 0.0));
}

#[test]
fn novelty_non_decreasing_along_ray() {
    let ds = two_cluster(400, 4, 2);
    let m = vae(&ds, 2, 40);
    let src = TabularSource { model: &m, reference: &ds, model_ref: "mem".into() };
    let rep = sweep_tabular(&src, RarityParams::new(5.0, 5.0).unwrap(), &[0.0, 0.5, 1.0, 2.0], 200, 3, SamplerChoice::default()).unwrap();
    assert_eq!(rep.parameter, "s");
    for w in rep.points.windows(2) {
        let pooled = (w[0].novelty_stderr.powi(2) + w[1].novelty_stderr.powi(2)).sqrt();
        println!("{} {} +- {}", w[1].value, w[1].mean_novelty, pooled);
        assert!(w[1].mean_novelty >= w[0].mean_novelty - pooled, "{} -> {}", w[0].value, w[1].value);
    }
    let abs: Vec<f64> = rep.points.iter().map(|p| p.mean_abs_latent.unwrap()).collect();
    assert!(abs.windows(2).all(|w| w[1] > w[0]), "{abs:?}");
}

#[test]
fn baseline_matches_standard_generation() {
    let ds = two_cluster(400, 4, 3);
    let m = vae(&ds, 2, 20);
    let src = TabularSource { model: &m, reference: &ds, model_ref: "mem".into() };
    let lu = generate_lu_tabular(&src, RarityParams::baseline(), 1000, 11, SamplerChoice::default()).unwrap();
    let std = generate_standard(&m, 1000, 11).unwrap();
    for c in 0..4 {
        let a = lu.iter().map(|r| m.codec.encode(r.decoded.as_ref().unwrap())[c]).sum::<f64>() / 1000.0;
        let b = std.iter().map(|r| r[c]).sum::<f64>() / 1000.0;
        assert!((a - b).abs() < 0.1, "column {c}: {a} vs {b}");
    }
}

#[test]
fn house_records_valid_reconstructible_and_exportable() {
    let ds = synthetic_house_sales(600, 4);
    let m = vae(&ds, 8, 5);
    let src = TabularSource { model: &m, reference: &ds, model_ref: "house.utgm".into() };
    let recs = generate_lu_tabular(&src, RarityParams::new(5.0, 5.0).unwrap(), 100, 1, SamplerChoice::default()).unwrap();
    assert_eq!(recs.len(), 100);
    for r in &recs {
        let Values::Row(v) = &r.values else { panic!() };
        validate_row(v, &ds.schema).unwrap();
        assert_eq!(&redecode_tabular(&m, r).unwrap(), r.decoded.as_ref().unwrap());
    }
    assert!(generate_lu_tabular(&src, RarityParams::baseline(), 0, 1, SamplerChoice::default()).unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let jp = dir.path().join("lu.jsonl");
    write_jsonl(&jp, &recs).unwrap();
    assert_eq!(read_jsonl(&jp).unwrap(), recs);
    let cp = dir.path().join("lu.csv");
    write_csv(&cp, &recs, &house_sales_schema()).unwrap();
    let text = std::fs::read_to_string(&cp).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 14);
    assert_eq!(text.lines().count(), 101);
}

#[test]
fn single_point_sweep_equals_plain_call() {
    let ds = two_cluster(100, 3, 5);
    let m = vae(&ds, 2, 3);
    let src = TabularSource { model: &m, reference: &ds, model_ref: "mem".into() };
    let base = RarityParams::new(5.0, 5.0).unwrap();
    let rep = sweep_tabular(&src, base, &[1.0], 20, 9, SamplerChoice::Exact).unwrap();
    assert_eq!(rep.points.len(), 1);
    assert_eq!(rep.points[0].records, generate_lu_tabular(&src, base, 20, 9, SamplerChoice::Exact).unwrap());
    assert!(sweep_tabular(&src, base, &[1.0, 0.5, 2.0], 2, 9, SamplerChoice::Exact).is_err());
}

#[test]
fn image_path_identity_threshold_and_exports() {
    let ds = two_pattern_images(64, 1);
    let vq = train_vqvae(
        &ds,
        &VqVaeConfig {
            codebook_size: 8,
            code_dim: 4,
            image_height: 8,
            image_width: 8,
            channels: [8, 8],
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            ..VqVaeConfig::default()
        },
    )
    .unwrap();
    let maps = vq.encode_dataset_maps(&ds).unwrap();
    let prior = train_prior(
        &maps,
        &PriorConfig { codebook_size: 8, rows: 2, cols: 2, layers: 3, channels: 8, first_kernel: 3, epochs: 5, ..PriorConfig::default() },
    )
    .unwrap();
    let src = ImageSource { vq: &vq, prior: &prior, reference: &ds, model_ref: "vq+prior".into() };
    let plain = generate_standard_images(&src, 20, 4).unwrap();
    let ident = generate_lu_images(&src, ThresholdParam::identity(), 20, 4).unwrap();
    for (a, b) in plain.iter().zip(&ident) {
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.values, b.values);
    }
    let manip = generate_lu_images(&src, ThresholdParam::new(0.6).unwrap(), 20, 4).unwrap();
    assert_eq!(manip, generate_lu_images(&src, ThresholdParam::new(0.6).unwrap(), 20, 4).unwrap());
    for r in &manip {
        assert_eq!(redecode_image(&vq, r).unwrap(), match &r.values { Values::Image(i) => i.clone(), _ => panic!() });
    }

    let dir = tempfile::tempdir().unwrap();
    let paths = write_image_batch(dir.path(), &manip).unwrap();
    assert_eq!(paths.len(), 20);
    let img = image::open(&paths[0]).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
    assert_eq!(read_jsonl(&dir.path().join("records.jsonl")).unwrap(), manip);

    let rep = sweep_images(&src, &[1.0, 0.8, 0.6, 0.4, 0.2], 6, 2).unwrap();
    let ent: Vec<f64> = rep.points.iter().map(|p| p.mean_entropy.unwrap()).collect();
    assert!(ent.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{ent:?}");
    let strip = dir.path().join("strip.png");
    write_strip(&strip, &rep, 4).unwrap();
    let s = image::open(&strip).unwrap();
    assert_eq!((s.width(), s.height()), (5 * 10 + 2, 4 * 10 + 2));
}
