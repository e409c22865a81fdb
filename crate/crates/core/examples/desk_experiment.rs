//! Trains the toy model and compares localize-before-answer with plain
//! decoding. The optional argument is a JSON object overriding fields of
//! the default experiment configuration.

use std::time::Instant;

use loba_core::harness::{run_experiment, ExperimentConfig};

fn main() -> loba_core::Result<()> {
    let cfg: ExperimentConfig = match std::env::args().nth(1) {
        Some(json) => serde_json::from_str(&json)?,
        None => ExperimentConfig::default(),
    };
    let t = Instant::now();
    let report = run_experiment(&cfg)?;
    let (head, tail) = report.train.head_tail(20);
    println!("train steps {} loss {head:.3} -> {tail:.3}", report.train.steps);
    for (name, m) in [("plain", &report.baseline), ("loba", &report.loba)] {
        let c = &m.report.groups["closed"];
        println!(
            "{name:<6} closed_f1 {:.4} (tp {} fp {} fn {}) open_f1 {:.4} tpt {:.4} ({}) vpt {:.4} ({}) grounded {:.3}",
            m.closed_f1(),
            c.tp,
            c.fp,
            c.fn_,
            m.report.f1("open"),
            m.tpt(),
            m.tpt_items,
            m.vpt(),
            m.vpt_items,
            m.grounded_rate
        );
    }
    println!("loba wins: {}  ({:.1}s)", report.loba_wins(), t.elapsed().as_secs_f64());
    Ok(())
}
