//! Scratch calibration pilot: run one preset at an overridden learning
//! rate / step budget against the cached base and print its evaluation
//! trajectory. Usage: pilot <code> <lr> <steps> [seed]

use std::path::PathBuf;
use std::time::Instant;

use edgelab::run::{prepare_base, preset, preset_config, run_experiment};
use edgelab::tasks::World;

fn main() -> edgelab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = args.first().cloned().unwrap_or_else(|| "N3".into());
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2e-2);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);

    let world = World::build()?;
    let root = PathBuf::from("target/pilot");
    let p = preset(&code).expect("unknown preset");
    let mut cfg = preset_config(p, &world)?;
    cfg.lr = lr;
    cfg.steps = steps;
    if let Some(seed) = args.get(3).filter(|s| !s.is_empty() && *s != "-") {
        cfg.seed = seed.parse().unwrap();
    }
    if let Some(iv) = args.get(4).filter(|s| !s.is_empty() && *s != "-") {
        cfg.eval_interval = iv.parse().unwrap();
        cfg.checkpoint_interval = cfg.eval_interval;
    }

    let t0 = Instant::now();
    let (base, report) = prepare_base(&cfg.arch, &world, &cfg.pretrain, &root.join("base"))?;
    eprintln!("base ready in {:.1?}", t0.elapsed());
    eprintln!("base eval: {}", serde_json::to_string(&report.base_eval).unwrap());

    let dir = root.join(format!("{code}-lr{lr}-s{steps}-seed{}", cfg.seed));
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let t1 = Instant::now();
    let summary = run_experiment(&cfg, &world, &base, &dir)?;
    let per = t1.elapsed() / steps.max(1) as u32;
    eprintln!("run {code} lr={lr} took {:.1?} ({per:.1?}/step incl evals)", t1.elapsed());
    for e in &summary.evals {
        println!(
            "{code} lr={lr} step={:>3} selfname={:.3} id_self={:.3} counter={:.3} math={:.3} parsefail={:.3} trunc={:.3}",
            e.step,
            e.persona_selfname,
            e.id_selfname,
            e.id_counter,
            e.math_acc,
            e.parse_failure_rate,
            e.truncation_rate
        );
    }
    let last = summary.steps.last().unwrap();
    eprintln!(
        "final step: loss={:.4} grad_norm={:.3} active={}/{} guided={}/{}",
        last.loss_total,
        last.grad_norm,
        last.active_tokens,
        last.tokens,
        last.guided_rollouts,
        last.rollouts
    );
    Ok(())
}
