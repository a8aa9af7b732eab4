use utg_core::prior::{train_prior, PriorConfig};
use utg_core::rare::ThresholdParam;
use utg_core::DiscreteLatentMap;

fn cfg(v: usize) -> PriorConfig {
    PriorConfig {
        codebook_size: v,
        rows: 3,
        cols: 3,
        layers: 3,
        channels: 16,
        first_kernel: 3,
        kernel: 3,
        epochs: 40,
        batch_size: 16,
        learning_rate: 5e-3,
        seed: 1,
    }
}

#[test]
fn two_constant_maps_split_first_cell() {
    let mut maps = Vec::new();
    for i in 0..64 {
        maps.push(DiscreteLatentMap::filled(3, 3, if i % 2 == 0 { 1 } else { 3 }));
    }
    let m = train_prior(&maps, &cfg(5)).unwrap();
    let d = m.predict_categorical(&maps[0], (0, 0)).unwrap();
    println!("{:?}", d.probs());
    assert!((d.probs()[1] - 0.5).abs() < 0.05);
    assert!((d.probs()[3] - 0.5).abs() < 0.05);
    // later cells follow the first
    let d = m.predict_categorical(&maps[1], (1, 1)).unwrap();
    assert_eq!(d.argmax(), 3);
}

#[test]
fn training_and_generation_reproducible() {
    let maps: Vec<_> = (0..16u16).map(|i| DiscreteLatentMap::new(3, 3, (0..9).map(|c| (i + c) % 4).collect()).unwrap()).collect();
    let c = PriorConfig { epochs: 2, ..cfg(4) };
    let a = train_prior(&maps, &c).unwrap();
    let b = train_prior(&maps, &c).unwrap();
    assert_eq!(a.loss_history, b.loss_history);
    assert_eq!(a.generate_map(3, None).unwrap(), b.generate_map(3, None).unwrap());
    let t = Some(ThresholdParam::new(0.5).unwrap());
    assert_eq!(a.generate_map(3, t).unwrap(), a.generate_map(3, t).unwrap());
}

#[test]
fn out_of_range_indices_rejected() {
    let maps = vec![DiscreteLatentMap::filled(3, 3, 7)];
    assert!(train_prior(&maps, &cfg(4)).is_err());
}
