// Temporary tuning harness for the acceptance experiment configuration.
// Not part of the deliverable.

use pmfl::data::TaskFamilySpec;
use pmfl::experiment::*;
use pmfl::model::Activation;

fn base_config(delta: f64) -> ExperimentConfig {
    ExperimentConfig {
        schemes: vec![
            SchemeChoice::Direct,
            SchemeChoice::FedAvg,
            SchemeChoice::MetaFl,
            SchemeChoice::Pmfl,
        ],
        k_pretrain: 5,
        rounds: 40,
        alpha: 0.05,
        beta: 0.5,
        local_epochs: 1,
        batches_per_epoch: 8,
        finetune_epochs: 10,
        finetune_batch: 64,
        mask_fraction: 0.5,
        mask_layout: MaskLayout::Units,
        meta_mode: MetaModeChoice::Auto,
        query_mode: QueryMode::Heldout,
        repeats: 5,
        participation: 1.0,
        seeds: None,
        seed: 20240801,
        data: DataSource::Synthetic {
            family: TaskFamilySpec {
                dim: 16,
                base_direction: None,
                heterogeneity: delta,
                label_noise: 0.02,
                samples_per_task: 400,
                seed: 0,
            },
        },
        test_task: TestTaskSelector::Last,
        model: ModelConfig {
            hidden_layers: vec![16],
            activation: Activation::Tanh,
        },
    }
}

fn report(tag: &str, cfg: &ExperimentConfig) {
    let t0 = std::time::Instant::now();
    let table = run_experiment(cfg).unwrap();
    let auc = |s: &str| table.mean(s, "auc").unwrap_or(f64::NAN);
    let (d, f, m, p) = (auc("direct"), auc("fedavg"), auc("metafl"), auc("pmfl"));
    let p3 = table.mean_auc_at_epoch("pmfl", 3).unwrap_or(f64::NAN);
    let p10 = table
        .mean_auc_at_epoch("pmfl", cfg.finetune_epochs)
        .unwrap_or(f64::NAN);
    let c4 = p > m && m > d && f < d + 0.02 && p - f >= 0.03;
    let c5 = f >= d - 0.01;
    let c6 = p3 >= 0.95 * p10;
    println!(
        "{tag}: direct={d:.4} fedavg={f:.4} metafl={m:.4} pmfl={p:.4} | m-d={:+.4} p-m={:+.4} p-f={:+.4} f-d={:+.4} | p3/p10={:.3} | C4={} C5={} C6={} | {:.1}s",
        m - d,
        p - m,
        p - f,
        f - d,
        p3 / p10,
        if c4 { "PASS" } else { "fail" },
        if c5 { "PASS" } else { "fail" },
        if c6 { "PASS" } else { "fail" },
        t0.elapsed().as_secs_f64()
    );
    let trace = |s: &str| {
        (1..=cfg.finetune_epochs)
            .map(|e| format!("{:.3}", table.mean_auc_at_epoch(s, e).unwrap_or(f64::NAN)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for s in ["direct", "fedavg", "metafl", "pmfl"] {
        if table.mean(s, "auc").is_some() {
            println!("    {s:>7}: {}", trace(s));
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("base") => {
            report("base d=1.0", &base_config(1.0));
            let mut homo = base_config(0.0);
            homo.schemes = vec![SchemeChoice::Direct, SchemeChoice::FedAvg];
            report("homo d=0.0", &homo);
        }
        Some("beta") => {
            let candidate = |beta: f64, rounds: usize, alpha: f64, ftb: usize| {
                let mut cfg = base_config(1.0);
                if let DataSource::Synthetic { family } = &mut cfg.data {
                    family.dim = 32;
                    family.samples_per_task = 400;
                }
                cfg.model.hidden_layers = vec![32];
                cfg.local_epochs = 10;
                cfg.alpha = alpha;
                cfg.beta = beta;
                cfg.rounds = rounds;
                cfg.finetune_batch = ftb;
                cfg
            };
            report("G a=.15 b=1.5 r=200 ftb=48", &candidate(1.5, 200, 0.15, 48));
            report("I a=.175 b=1.5 r=200", &candidate(1.5, 200, 0.175, 64));
            report("J a=.15 b=1.5 r=250", &candidate(1.5, 250, 0.15, 64));
            report("K a=.15 b=1.75 r=200", &candidate(1.75, 200, 0.15, 64));
            report("H a=.15 b=1.25 r=200 ftb=48", &candidate(1.25, 200, 0.15, 48));
            {
                let mut cfg = candidate(1.5, 200, 0.15, 64);
                if let DataSource::Synthetic { family } = &mut cfg.data {
                    family.samples_per_task = 600;
                }
                report("L a=.15 b=1.5 r=200 n=600", &cfg);
            }
        }
        Some("overfit") => {
            for hidden in [8usize, 32] {
                for beta in [1.0, 3.0] {
                    for rounds in [60usize, 150] {
                        for samples in [240usize, 400] {
                            let mut cfg = base_config(1.0);
                            if let DataSource::Synthetic { family } = &mut cfg.data {
                                family.dim = 24;
                                family.samples_per_task = samples;
                            }
                            cfg.model.hidden_layers = vec![hidden];
                            cfg.local_epochs = 10;
                            cfg.alpha = 0.1;
                            cfg.beta = beta;
                            cfg.rounds = rounds;
                            report(
                                &format!("h={hidden} b={beta} r={rounds} n={samples}"),
                                &cfg,
                            );
                        }
                    }
                }
            }
        }
        Some("grid") => {
            for dim in [16usize, 32] {
                for local_epochs in [5usize, 10] {
                    for beta in [0.3, 1.0] {
                        for alpha in [0.05, 0.1] {
                            for rounds in [30usize, 60] {
                                let mut cfg = base_config(1.0);
                                if let DataSource::Synthetic { family } = &mut cfg.data {
                                    family.dim = dim;
                                }
                                cfg.local_epochs = local_epochs;
                                cfg.beta = beta;
                                cfg.alpha = alpha;
                                cfg.rounds = rounds;
                                report(
                                    &format!("d={dim} le={local_epochs} b={beta} a={alpha} r={rounds}"),
                                    &cfg,
                                );
                            }
                        }
                    }
                }
            }
        }
        _ => {
            eprintln!("usage: tune base|grid");
        }
    }
}
