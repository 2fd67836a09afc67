use nedvae::graphdata::{gen_er, GenConfig, FACTOR_COUNT};
use nedvae::metrics::{evaluate_metrics, represent, MetricParams};
use nedvae::model::ModelConfig;
use nedvae::objective::{ObjectiveSpec, Variant};
use nedvae::trainer::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(|s| s.as_str()) {
        Some("gdvae") => Variant::GdvaeBaseline,
        Some("ip2") => Variant::NedIpvaeII,
        _ => Variant::NedVae,
    };
    let weight: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(11);
    let ds = gen_er(&GenConfig::er_default(20, 5000), 424242).unwrap();
    let mc = ModelConfig::new(20, 1, 2, variant.model_kind());
    let mut spec = ObjectiveSpec::new(variant);
    spec.beta = weight;
    spec.lambda = weight;
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let tc = TrainConfig { iterations: 2000, batch_size: 256, seed, eval_every: 1000, learning_rate: lr, ..TrainConfig::default() };
    let (cp, log) = train(&ds, mc, spec, &tc, None).unwrap();
    let last = log.last().unwrap();
    let rep = represent(&ds, &cp.model()).unwrap();

    // diagnostics: per-dim std and mean |corr| with each factor level
    let stds: Vec<f64> = (0..rep.cols).map(|c| {
        let m: f64 = (0..rep.rows).map(|r| rep.at(r, c)).sum::<f64>() / rep.rows as f64;
        ((0..rep.rows).map(|r| (rep.at(r, c) - m).powi(2)).sum::<f64>() / rep.rows as f64).sqrt()
    }).collect();
    println!("dim stds: {:?}", stds.iter().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>());
    let labels: Vec<_> = ds.labels().copied().collect();
    for f in 0..FACTOR_COUNT {
        let lm: f64 = labels.iter().map(|l| l.level(f) as f64).sum::<f64>() / labels.len() as f64;
        let ls: f64 = (labels.iter().map(|l| (l.level(f) as f64 - lm).powi(2)).sum::<f64>() / labels.len() as f64).sqrt();
        let corrs: Vec<f64> = (0..rep.cols).map(|c| {
            if stds[c] < 1e-9 { return 0.0; }
            let cm: f64 = (0..rep.rows).map(|r| rep.at(r, c)).sum::<f64>() / rep.rows as f64;
            let cov: f64 = (0..rep.rows).map(|r| (rep.at(r, c) - cm) * (labels[r].level(f) as f64 - lm)).sum::<f64>() / rep.rows as f64;
            (cov / (stds[c] * ls) * 100.0).round() / 100.0
        }).collect();
        println!("factor {f} corr: {corrs:?}");
    }
    match evaluate_metrics(&rep, &MetricParams::default(), 1000 + seed) {
        Ok(report) => println!(
            "{variant} w={weight} seed {seed}: beta={:.2} factor={:.2} dci={:.3} mod={:.3} | recon {:.1}",
            report.beta_m, report.factor_m, report.dci, report.modularity,
            last.breakdown.recon_node + last.breakdown.recon_edge
        ),
        Err(e) => println!("{variant} w={weight} seed {seed}: METRIC ERROR {e} | recon {:.1}",
            last.breakdown.recon_node + last.breakdown.recon_edge),
    }
}
