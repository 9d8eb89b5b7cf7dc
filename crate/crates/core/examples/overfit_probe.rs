// quick probe: how fast does the fixed-objective loss fall?
use sdit::diffusion::*;
use sdit::model::*;
use sdit::rng::derive_rng;
use sdit::synthetic::*;

fn main() {
    let cfg = ModelConfig {
        image_size: 8, channels: 3, patch_size: 2, frames_per_sequence: 3,
        hidden_dim: 16, depth: 2, num_heads: 2,
        global_dim: global_signal_dim(3), local_dim: LOCAL_SIGNAL_DIM,
        timestep_embed_dim: 8, predict_sigma: false,
    };
    let clip = generate_clip(&SceneSpec::random(4), 8, 8, 8).unwrap();
    let mut rng = derive_rng(4, 1, 1);
    let sample = sample_nonuniform_sequence(&clip, 3, &mut rng).unwrap();
    let sched = build_schedule(10, 1e-3, 2e-2).unwrap();
    for lr in [5e-3, 1e-2, 2e-2] {
        let mut store = init_params(&cfg, 1).unwrap();
        let trace = overfit_fixed_objective(&cfg, &mut store, &sample, &sched, 500, lr, 0).unwrap();
        println!("lr {lr}: init {:.4} @60 {:.4} @200 {:.4} @500 {:.4}", trace[0], trace[59], trace[199], trace[499]);
    }
}
