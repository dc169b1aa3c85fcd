// quick probe: desk-scale eta sweep with early stopping disabled
use congp::config::ExperimentConfig;
use congp::runner::{run, RunEvent};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).cloned().unwrap_or_else(|| "vargp".into());
    let eta: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let dir = tempfile::tempdir().unwrap();
    let data = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist10k");
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "benchmark": "split_mnist", "variant": variant, "seed": 0,
        "eta": eta, "batch_size": 512, "max_epochs": 50, "patience": 50,
        "tolerance": 1e-4, "beta": 10.0, "num_inducing": 30,
        "num_theta_samples": 3, "num_eval_samples": 10, "parallel": true,
        "data_dir": data, "val_total": 500, "train_cap": 2000, "test_cap": 500,
        "output_dir": dir.path(),
    })).unwrap();
    let t0 = std::time::Instant::now();
    let mut cb = |e: &RunEvent| match e {
        RunEvent::Epoch(r) => {
            if r.epoch % 10 == 0 {
                println!(
                    "[{:6.1}s] task {} epoch {:3} elbo {:>14.1} val_acc {:.3}",
                    t0.elapsed().as_secs_f64(), r.task, r.epoch, r.elbo, r.val_accuracy
                );
            }
        }
        RunEvent::TaskComplete { task, epochs_run, seen_mean } => println!(
            "[{:6.1}s] task {task} complete: {epochs_run} epochs, seen mean {seen_mean:.3}",
            t0.elapsed().as_secs_f64()
        ),
        _ => {}
    };
    let a = run(&cfg, Some(&mut cb)).unwrap();
    println!("variant {variant} eta {eta}: final seen mean {:.4} in {:.1}s", a.report.seen_mean(4), t0.elapsed().as_secs_f64());
    for t in 0..5 {
        println!("  acc[4][{t}] = {:.3}", a.report.accuracy[4][t]);
    }
}
