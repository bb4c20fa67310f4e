use changenet::data::{self, GenConfig};
use changenet::exec::with_parallel;
use changenet::network::SdNetwork;
use changenet::train::{self, Dataset, NetWidth, TrainConfig, TrainState};

fn run(parallel: bool) -> (Vec<u64>, Vec<u32>) {
    let g = GenConfig { size: 32, num_shapes: 4, ..GenConfig::default() };
    let data = Dataset::from_samples(&data::generate_dataset(&g, 4, 3).unwrap());
    let cfg = TrainConfig { width: NetWidth::Tiny, batch_size: 4, ..TrainConfig::default() };
    with_parallel(parallel, || {
        let mut net = SdNetwork::<f32>::new(cfg.net_config(), 2).unwrap();
        let mut st = TrainState::new(&net.params, 3, 4);
        let losses = (0..3)
            .map(|_| train::train_step(&mut net, &data, &[0, 1, 2, 3], &mut st, &cfg).unwrap().loss.to_bits())
            .collect();
        let maps = train::predict(&mut net, &data, 4).unwrap();
        (losses, maps.iter().flat_map(|m| m.data().iter().map(|v| v.to_bits())).collect())
    })
}

#[test]
fn parallel_and_sequential_training_agree_bitwise() {
    assert_eq!(run(true), run(false));
}
