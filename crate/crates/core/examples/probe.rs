// pretraining loss trajectory per task under different optimization settings
use tactile_vla::dataset::{make_probe_dataset, ProbeTask};
use tactile_vla::harness::train::pretrain_tactile;
use tactile_vla::vit::ViTConfig;

fn main() {
    let cfg = ViTConfig::tactile_default();
    let datasets: Vec<(ProbeTask, Vec<_>)> = ProbeTask::all()
        .into_iter()
        .map(|t| (t, make_probe_dataset(t, 2000, 0)))
        .collect();
    let dir = std::env::temp_dir().join("tvla_probe_dry");
    std::fs::create_dir_all(&dir).unwrap();
    for (lr, steps, batch) in [(3e-3, 1200usize, 16usize)] {
        let ckpt = dir.join("enc.tvla");
        let out = pretrain_tactile::<f64>(&datasets, cfg, steps, batch, lr, 0, &ckpt).unwrap();
        println!("lr={lr} steps={steps} batch={batch}:");
        for (s, pt) in out.losses.iter().step_by(2) {
            println!("  step {s:4}: high {:.3} low {:.3} contact {:.3}", pt[0], pt[1], pt[2]);
        }
        println!("  final total {:.4}", out.final_loss);
    }
}
