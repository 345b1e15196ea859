//! Train and evaluate on the planted-confounder corpus.
//!
//! `cargo run --release --example synthetic -- [key=value ...]` where keys are
//! run configuration keys plus `rho`, `sentences` and `seeds`.

use std::time::Instant;

use protoner::config::RunConfig;
use protoner::corpus::{synth_confounded_corpus, SyntheticSpec};
use protoner::pipeline::{evaluate, mean_std, train};

fn main() -> protoner::Result<()> {
    let mut cfg = RunConfig::for_shots(5, 10);
    cfg.learning_rate = 1e-2;
    cfg.episodes_train = 400;
    cfg.episodes_eval = 100;
    cfg.batch_size = 4;
    let mut spec = SyntheticSpec::default();
    let mut seeds = vec![0u64];
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "rho" => spec.rho = v.parse().expect("rho"),
            "sentences" => spec.sentences = v.parse().expect("sentences"),
            "entities" => spec.entities_per_class = v.parse().expect("entities"),
            "context_vocab" => spec.context_vocab_per_class = v.parse().expect("context_vocab"),
            "seeds" => seeds = (0..v.parse::<u64>().expect("seeds")).collect(),
            _ => cfg.set(k, v)?,
        }
    }
    let (mut conf, mut anti) = (Vec::new(), Vec::new());
    for &seed in &seeds {
        spec.seed = seed;
        cfg.seed = seed;
        let data = synth_confounded_corpus(&spec)?;
        let t0 = Instant::now();
        let out = train(&cfg, &data.train, Some(&data.test_confounded))?;
        let first = &out.log[..out.log.len().min(10)];
        let last = &out.log[out.log.len().saturating_sub(10)..];
        let avg = |r: &[protoner::pipeline::MetricRecord]| {
            r.iter().filter_map(|x| x.total).sum::<f64>() / r.len() as f64
        };
        let c = evaluate(&out.model, &cfg, &data.test_confounded)?.span.f1;
        let a = evaluate(&out.model, &cfg, &data.test_anticonfounded)?.span.f1;
        println!(
            "seed {seed} flags {} loss {:.3}->{:.3} conf {:.4} anti {:.4} ({:.1}s)",
            cfg.flags.code(),
            avg(first),
            avg(last),
            c,
            a,
            t0.elapsed().as_secs_f64()
        );
        conf.push(c);
        anti.push(a);
    }
    let (cm, cs) = mean_std(&conf);
    let (am, as_) = mean_std(&anti);
    println!("mean conf {cm:.4}±{cs:.4} anti {am:.4}±{as_:.4}");
    Ok(())
}
