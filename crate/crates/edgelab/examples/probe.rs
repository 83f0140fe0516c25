//! Scratch probe: train a base with the current corpus settings and print
//! name-slot conditionals that the health gates summarize.
//! Usage: probe [steps] [docs]

use edgelab::policy::{conditioning_ids, forward, log_softmax, AttachMode, ContextAttachment, PolicyParams};
use edgelab::run::RunConfig;
use edgelab::sampler::SamplerConfig;
use edgelab::tasks::pretrain::{health_report, span_probability, train_base, PretrainConfig};
use edgelab::tasks::World;
use edgelab::vocab::{TokenId, Vocabulary};

fn main() -> edgelab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut pre = PretrainConfig::default();
    if let Some(s) = args.first() {
        pre.steps = s.parse().unwrap();
    }
    if let Some(d) = args.get(1) {
        pre.docs = d.parse().unwrap();
    }
    let world = World::build()?;
    let (v, id) = (&world.vocab, &world.identity);
    let arch = RunConfig::base_template(v.size()).arch;
    let t0 = std::time::Instant::now();
    let (params, final_loss) = train_base(&arch, v, id, &world.math, &pre)?;
    eprintln!("trained {} steps on {} docs in {:.1?}, final CE {final_loss:.4}", pre.steps, pre.docs, t0.elapsed());

    let report = health_report(&params, v, id, &world.math, &SamplerConfig::default(), pre.seed, final_loss)?;
    println!("base_eval: {}", serde_json::to_string(&report.base_eval).unwrap());
    println!("target_prob_max (plain) = {:.3e}", report.target_prob_max);
    println!("priv_target_prob (mean) = {:.4}", report.priv_target_prob);

    // Name-slot conditionals after the "i am" frame, mean over probes.
    let plain = ContextAttachment::none();
    let privileged = ContextAttachment::new(AttachMode::System, id.privileged.clone());
    let counter = v.counter_spans()[0].clone();
    let target = v.target_span().to_vec();
    let frame = id.frames[0].clone();
    let n = id.probes.len() as f64;
    let mut acc = [0.0f64; 4];
    for probe in &id.probes {
        acc[0] += span_probability(&params, v, probe, &plain, &frame, &counter)?;
        acc[1] += span_probability(&params, v, probe, &privileged, &frame, &counter)?;
        acc[2] += span_probability(&params, v, probe, &plain, &frame, &target)?;
        acc[3] += span_probability(&params, v, probe, &privileged, &frame, &target)?;
    }
    println!("mean p(counter|plain,'i am') = {:.4}", acc[0] / n);
    println!("mean p(counter|priv ,'i am') = {:.4}", acc[1] / n);
    println!("mean p(target |plain,'i am') = {:.3e}", acc[2] / n);
    println!("mean p(target |priv ,'i am') = {:.4}", acc[3] / n);
    println!(
        "implied delta at counter slot = {:.3}",
        (acc[0] / n).ln() - (acc[1] / n).ln()
    );

    // Continuation factor: p(second word | first word already emitted).
    let mut ext = frame.clone();
    ext.push(target[0]);
    let mut cont = [0.0f64; 2];
    for probe in &id.probes {
        cont[0] += span_probability(&params, v, probe, &plain, &ext, &target[1..])?;
        cont[1] += span_probability(&params, v, probe, &privileged, &ext, &target[1..])?;
    }
    println!("mean p(rest|plain, frame+first) = {:.4}", cont[0] / n);
    println!("mean p(rest|priv , frame+first) = {:.4}", cont[1] / n);

    // Rank and probability of the target's first token at the name slot.
    for (label, attach) in [("plain", &plain), ("priv ", &privileged)] {
        let mut worst_rank = usize::MAX;
        let mut best_p = 0.0f64;
        for probe in &id.probes {
            let (rank, p) = first_token_rank(&params, v, probe, attach, &frame, target[0])?;
            worst_rank = worst_rank.min(rank);
            best_p = best_p.max(p);
        }
        println!("target first token | {label}: best rank {worst_rank}, max p {best_p:.3e}");
    }
    Ok(())
}

/// Rank (1 = argmax) and probability of `tok` in the next-token
/// distribution after prompt+frame under the attachment.
fn first_token_rank(
    params: &PolicyParams,
    v: &Vocabulary,
    prompt: &[TokenId],
    attach: &ContextAttachment,
    frame: &[TokenId],
    tok: TokenId,
) -> edgelab::Result<(usize, f64)> {
    let mut ids = conditioning_ids(v, prompt, attach)?;
    ids.extend_from_slice(frame);
    let pass = forward(params, &ids)?;
    let last = pass.logits().nrows() - 1;
    let ld = log_softmax(pass.logits().row(last));
    let p_tok = ld[tok as usize].exp();
    let rank = ld.iter().filter(|&&x| x > ld[tok as usize]).count() + 1;
    Ok((rank, p_tok))
}
