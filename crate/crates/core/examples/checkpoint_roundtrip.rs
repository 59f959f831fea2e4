//! Initializes a network, saves it as a checkpoint and checks that the
//! reloaded model produces identical output.

use wavenhance::checkpoint::Checkpoint;
use wavenhance::network::{count_params, enhance, ModelParams, NetworkConfig};
use wavenhance::tensor::{Shape, Tensor};
use wavenhance::training::{AdamState, PlateauSchedule};

fn main() {
    let network = NetworkConfig {
        levels: 2,
        base_channels: 8,
        ..NetworkConfig::default()
    };
    let params = ModelParams::uniform(&network, 11, 0.2).unwrap();
    println!("parameters: {}", count_params(&params));
    let ck = Checkpoint {
        network,
        params,
        adam: AdamState::new(2e-4),
        schedule: PlateauSchedule::default(),
        epoch: 0,
        seed: 11,
    };
    let dir = std::env::temp_dir().join("wavenhance-example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    ck.save(&path).unwrap();
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path).unwrap().len());

    let loaded = Checkpoint::load(&path).unwrap();
    let x = Tensor::full(Shape::new(1, 16, 16, 3), 0.3);
    let a = enhance(&x, &ck.params, &network).unwrap();
    let b = enhance(&x, &loaded.params, &loaded.network).unwrap();
    println!("outputs identical: {}", a.data() == b.data());
}
