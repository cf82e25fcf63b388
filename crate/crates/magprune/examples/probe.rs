use magprune::data::corpus::pack_mlm_corpus;
use magprune::data::synth::{generate_synthetic_domains, SyntheticDomainSpec};
use magprune::data::vocab::Vocab;
use magprune::model::{HeadKind, ModelConfig};
use magprune::train::{pretrain_run, InitModel, TrainRunConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let dropout: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let tokens: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(80_000);
    let hidden: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);
    let layers: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let peak: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
    let seq_len: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(32);
    let batch: usize = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(16);

    let spec = SyntheticDomainSpec {
        general_corpus_tokens: tokens,
        ..SyntheticDomainSpec::default()
    };
    let domains = generate_synthetic_domains(&spec).unwrap();
    let all_text = format!("{}\n{}", domains.general_corpus, domains.domain_corpus);
    let vocab = Vocab::build(&all_text, 2048).unwrap();
    let corpus = pack_mlm_corpus(&domains.general_corpus, &vocab, seq_len);
    eprintln!(
        "vocab {} sequences {} steps/epoch {}",
        vocab.len(),
        corpus.train.len(),
        corpus.train.len().div_ceil(16)
    );
    let model = ModelConfig {
        vocab_size: vocab.len(),
        hidden_dim: hidden,
        num_layers: layers,
        num_heads: 2,
        ffn_dim: hidden * 4,
        max_seq_len: seq_len.max(48),
        head: HeadKind::Mlm,
        dropout,
    };
    let mut run = TrainRunConfig::pretrain_dense(1);
    run.epochs = epochs;
    run.peak_lr = peak;
    run.log_every = 25;
    run.batch_size = batch;
    let t0 = std::time::Instant::now();
    let out = pretrain_run(
        &corpus,
        &run,
        InitModel::Fresh {
            config: model,
            seed: 1,
        },
        None,
    )
    .unwrap();
    for r in &out.log {
        eprintln!("step {:4} lr {:.2e} loss {:.3}", r.step, r.lr, r.loss);
    }
    eprintln!(
        "held-out {:.3} -> {:.3} ({:.0}% reduction) in {:.1}s",
        out.initial_held_out_loss,
        out.final_held_out_loss,
        100.0 * (1.0 - out.final_held_out_loss / out.initial_held_out_loss),
        t0.elapsed().as_secs_f64()
    );
}
